"""
Synthetic cohorts generated from known joint-model parameters.

Covariates, random effects, irregular visit schedules, a latent BMIZ path with
missing-at-random gaps, event times by inversion of the cumulative hazard and
administrative censoring at the end of the study window.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit

from cohort_data import (
    Cohort, EventRecord, LongitudinalRecord, Subject, standardize, write_cohort,
)
from config import SimulationConfig
from errors import ConfigError, RangeError
from growth_imputation import BmiRecord, LmsReference, bmi_from_zscore
from hazard_model import (
    Baseline, ConstantBaseline, GompertzBaseline, SurvivalParams, cumulative_hazard,
)
from longitudinal_model import LongitudinalParams, bmiz_trajectory, eta
from model_spec import SURVIVAL_COVARIATES, ModelSpec
from performance_profiler import ComponentProfiler

logger = logging.getLogger(__name__)

DEFAULT_BETA = {"intercept": 3.706, "time": 0.063, "sex": -0.085, "sage": 0.219, "bmiz": 0.044}
DEFAULT_SIGMA = 0.222
DEFAULT_RE_SD = (0.3, 0.05)
DEFAULT_OMEGA = {
    "comorb": 0.087, "kidneyhist": 0.726, "cortico": 1.043, "immuno": -1.584,
    "immmod": -1.119, "bcell": 0.350, "ccb": 1.992, "acei": 0.163,
}
DEFAULT_ALPHA = {"value": 2.983, "slope": 1.0, "area": 2.983}
COVARIATE_PREVALENCE = {
    "comorb": 0.13, "kidneyhist": 0.09, "cortico": 0.58, "immuno": 0.37,
    "immmod": 0.27, "bcell": 0.23, "ccb": 0.17, "acei": 0.18,
}


@dataclass
class SimTruth:
    """Generating parameters plus covariate, visit and censoring settings."""
    long_params: LongitudinalParams
    D: np.ndarray
    surv_params: SurvivalParams
    female_rate: float = 0.61
    prevalence: Dict[str, float] = field(default_factory=lambda: dict(COVARIATE_PREVALENCE))
    age_mean: float = 11.1
    age_sd: float = 3.96
    age_range: Tuple[float, float] = (0.02, 17.96)
    study_horizon: float = 6.75
    entry_window: float = 0.5
    mean_visits: float = 17.0
    dropout_rate: float = 0.0
    bmiz_missing_rate: float = 0.3
    bmiz_sd: Tuple[float, float, float] = (1.0, 0.1, 0.2)  # intercept, slope, noise

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        rates = dict(self.prevalence, female=self.female_rate, bmiz_missing=self.bmiz_missing_rate)
        bad = {k: v for k, v in rates.items() if not 0.0 <= v <= 1.0}
        if bad:
            raise ConfigError(f"rates outside [0, 1]: {bad}")
        if self.long_params.sigma < 0:
            raise ConfigError("residual sd must be >= 0")
        if self.D.shape != (2, 2) or np.any(np.linalg.eigvalsh(0.5 * (self.D + self.D.T)) < -1e-12):
            raise ConfigError("random-effect covariance must be a 2x2 positive semi-definite matrix")
        if not 0 <= self.entry_window < self.study_horizon:
            raise ConfigError("entry window must lie inside the study horizon")
        if self.mean_visits < 2:
            raise ConfigError("mean_visits must be >= 2")

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(name="truth", longitudinal_terms=self.long_params.terms,
                         survival_covariates=self.surv_params.covariates, association=tuple(self.surv_params.alpha))

    def with_config(self, config: SimulationConfig) -> "SimTruth":
        return replace(self, study_horizon=config.study_horizon, entry_window=config.entry_window,
                       mean_visits=config.mean_visits, bmiz_missing_rate=config.bmiz_missing_rate)

    def to_frame(self) -> pd.DataFrame:
        rows = [(f"beta.{t}", float(v)) for t, v in zip(self.long_params.terms, self.long_params.beta)]
        rows.append(("sigma", self.long_params.sigma))
        rows += [("D.1.1", self.D[0, 0]), ("D.1.2", self.D[0, 1]), ("D.2.2", self.D[1, 1])]
        rows += [(f"omega.{c}", float(v)) for c, v in zip(self.surv_params.covariates, self.surv_params.omega)]
        rows += [(f"alpha.{a}", v) for a, v in self.surv_params.alpha.items()]
        baseline = self.surv_params.baseline
        rows += [(f"baseline.{name}", float(getattr(baseline, name)))
                 for name in ("log_rate", "log_scale", "growth", "shape", "rate") if hasattr(baseline, name)]
        return pd.DataFrame(rows, columns=["parameter", "value"])


def default_truth(association: Sequence[str] = ("area",), baseline: Optional[Baseline] = None) -> SimTruth:
    """Generating values taken from the fitted source-study model."""
    long_params = LongitudinalParams.from_mapping(DEFAULT_BETA, DEFAULT_SIGMA)
    alpha = {a: DEFAULT_ALPHA[a] for a in ("value", "slope", "area") if a in association}
    if baseline is None:
        mean_eta = DEFAULT_BETA["intercept"] + DEFAULT_BETA["sex"] * 0.61
        growth = -alpha.get("area", 0.0) * mean_eta
        level = np.log(0.02) - alpha.get("value", 0.0) * mean_eta
        baseline = GompertzBaseline(float(level), float(growth))
    omega = np.array([DEFAULT_OMEGA[c] for c in SURVIVAL_COVARIATES])
    surv_params = SurvivalParams(SURVIVAL_COVARIATES, omega, alpha, baseline)
    return SimTruth(long_params, np.diag(np.square(DEFAULT_RE_SD)), surv_params)


def null_truth(baseline: Optional[Baseline] = None) -> SimTruth:
    """No covariate effects and no association."""
    truth = default_truth(association=(), baseline=baseline or ConstantBaseline(np.log(0.02)))
    surv = SurvivalParams(SURVIVAL_COVARIATES, np.zeros(len(SURVIVAL_COVARIATES)), {}, truth.surv_params.baseline)
    return replace(truth, surv_params=surv)


def synthetic_lms_reference(max_age: float = 26.0, step: float = 0.25) -> LmsReference:
    """Smooth stand-in for a BMI-for-age growth reference."""
    ages = np.arange(0.0, max_age + step / 2, step)
    L, M, S = {}, {}, {}
    for sex in (0, 1):
        L[sex] = -1.6 + 0.04 * ages
        M[sex] = 15.5 + 0.4 * ages + 0.3 * sex
        S[sex] = 0.08 + 0.002 * ages
    return LmsReference({0: ages, 1: ages.copy()}, L, M, S)


def lms_frame(reference: LmsReference) -> pd.DataFrame:
    parts = [pd.DataFrame({"sex": sex, "age": reference.ages[sex], "L": reference.L[sex],
                           "M": reference.M[sex], "S": reference.S[sex]}) for sex in sorted(reference.ages)]
    return pd.concat(parts, ignore_index=True)


def simulate_event_time(subject: Subject, truth: SimTruth, b: np.ndarray, u: float,
                        upper: Optional[float] = None) -> float:
    """Solve Lambda(entry, t) = -log(u); inf when no root before `upper` (default twice the horizon)."""
    if not 0.0 <= u <= 1.0:
        raise RangeError(f"uniform draw must lie in (0, 1), got {u}")
    entry = subject.event.entry_time
    if u == 1.0:
        return entry
    if u == 0.0:
        return np.inf
    upper = 2.0 * truth.study_horizon if upper is None else upper
    target = -np.log(u)
    trajectory = bmiz_trajectory(subject)

    def excess(t):
        return cumulative_hazard(subject, truth.long_params, truth.surv_params, b, entry, t, trajectory) - target

    if excess(upper) < 0:
        return np.inf
    return float(optimize.brentq(excess, entry, upper, xtol=1e-10, rtol=1e-12))


@dataclass
class _Latent:
    subject: Subject  # full visit schedule, complete BMIZ, placeholder follow-up
    b: np.ndarray
    u: float
    censor_time: float
    bmiz_path: Tuple[float, float]
    eps: np.ndarray
    extra: Tuple[float, float]  # residual and BMIZ noise for a record added at T
    miss_u: np.ndarray


def _latent_subject(truth: SimTruth, index: int, seq: np.random.SeedSequence, age: float, sage: float) -> _Latent:
    rng = np.random.default_rng(seq)
    sid = f"S{index + 1:04d}"
    sex = int(rng.uniform() < truth.female_rate)
    baseline = {c: int(rng.uniform() < truth.prevalence.get(c, 0.0)) for c in SURVIVAL_COVARIATES}
    entry = float(rng.uniform(0.0, truth.entry_window))
    b = rng.multivariate_normal(np.zeros(2), truth.D)

    n_visits = 2 + int(rng.poisson(truth.mean_visits - 2))
    spacing = (truth.study_horizon - entry) / n_visits
    offsets = spacing * (np.arange(1, n_visits) + rng.uniform(-0.4, 0.4, n_visits - 1))
    times = np.concatenate([[entry], entry + offsets])

    sd0, sd1, sd_noise = truth.bmiz_sd
    z0, z1 = rng.normal(0.0, sd0), rng.normal(0.0, sd1)
    bmiz = z0 + z1 * (times - entry) + rng.normal(0.0, sd_noise, times.size)
    eps = rng.standard_normal(times.size)
    extra = (float(rng.standard_normal()), float(rng.normal(0.0, sd_noise)))
    miss_u = rng.uniform(size=times.size)
    u = float(rng.uniform())
    dropout = float(rng.exponential(1.0))
    censor = truth.study_horizon
    if truth.dropout_rate > 0:
        censor = min(censor, entry + dropout / truth.dropout_rate)

    records = tuple(LongitudinalRecord(sid, float(t), 0.0, float(z)) for t, z in zip(times, bmiz))
    subject = Subject(sid, sex, float(age), float(sage), baseline, records,
                      EventRecord(sid, entry, truth.study_horizon, 0))
    return _Latent(subject, b, u, censor, (z0, z1), eps, extra, miss_u)


def _latents(truth: SimTruth, n: int, seed: int) -> Tuple[List[_Latent], float, float]:
    if n < 2:
        raise ConfigError("simulation needs at least 2 subjects")
    children = np.random.SeedSequence(seed).spawn(n + 1)
    age_rng = np.random.default_rng(children[0])
    ages = np.clip(age_rng.normal(truth.age_mean, truth.age_sd, n), *truth.age_range)
    sage, age_mean, age_sd = standardize(ages)
    latents = [_latent_subject(truth, i, children[i + 1], ages[i], sage[i]) for i in range(n)]
    return latents, age_mean, age_sd


@dataclass
class SimCohort:
    cohort: Cohort  # observable data, BMIZ partly missing
    complete_cohort: Cohort  # same data with every BMIZ value
    truth: SimTruth
    true_b: np.ndarray
    event_times: np.ndarray  # latent T*, inf when beyond the search bracket
    censor_times: np.ndarray
    bmi_records: List[BmiRecord]
    lms_reference: LmsReference

    def truth_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "subject_id": self.cohort.subject_ids,
            "b0": self.true_b[:, 0],
            "b1": self.true_b[:, 1],
            "event_time_true": self.event_times,
            "censor_time": self.censor_times,
            "event": self.cohort.event_flags,
        })


def _observe(latent: _Latent, truth: SimTruth, event_time: float, reference: LmsReference):
    subject = latent.subject
    sid = subject.subject_id
    entry = subject.event.entry_time
    observed = min(event_time, latent.censor_time)
    event = int(event_time <= latent.censor_time)
    keep = subject.times <= observed
    times = list(subject.times[keep])
    bmiz = [r.bmiz for r, k in zip(subject.records, keep) if k]
    eps = list(latent.eps[keep])
    miss_u = list(latent.miss_u[keep])
    if len(times) < 2:
        z0, z1 = latent.bmiz_path
        times.append(observed)
        bmiz.append(z0 + z1 * (observed - entry) + latent.extra[1])
        eps.append(latent.extra[0])
        miss_u.append(1.0)

    skeleton = tuple(LongitudinalRecord(sid, float(t), 0.0, float(z)) for t, z in zip(times, bmiz))
    complete = replace(subject, records=skeleton, event=EventRecord(sid, entry, float(observed), event))
    mean = np.atleast_1d(eta(complete, truth.long_params, latent.b, np.array(times), bmiz_trajectory(complete)))
    values = mean + truth.long_params.sigma * np.asarray(eps)
    complete = replace(complete, records=tuple(replace(r, value=float(v)) for r, v in zip(skeleton, values)))

    p_missing = np.clip(2.0 * truth.bmiz_missing_rate * expit(values - values[0]), 0.0, 0.95)
    missing = np.asarray(miss_u) < p_missing
    missing[0] = False
    observed_records = tuple(replace(r, bmiz=None) if m else r for r, m in zip(complete.records, missing))
    visible = replace(complete, records=observed_records)

    bmi_records = []
    for r, m in zip(complete.records, missing):
        if not m:
            age = subject.age_entry + r.time - entry
            bmi_records.append(BmiRecord(sid, r.time, float(bmi_from_zscore(r.bmiz, age, subject.sex, reference))))
    return visible, complete, bmi_records


def simulate_cohort(truth: SimTruth, n: int, seed: int,
                    reference: Optional[LmsReference] = None) -> SimCohort:
    reference = reference or synthetic_lms_reference()
    with ComponentProfiler("simulation", "cohort", {"subjects": n}):
        latents, age_mean, age_sd = _latents(truth, n, seed)
        visible, complete, bmi_records, event_times = [], [], [], []
        for latent in latents:
            t_star = simulate_event_time(latent.subject, truth, latent.b, latent.u)
            obs, full, bmi = _observe(latent, truth, t_star, reference)
            visible.append(obs)
            complete.append(full)
            bmi_records.extend(bmi)
            event_times.append(t_star)
    provenance = {"source": "simulation", "seed": seed, "n": n}
    cohort = Cohort(tuple(visible), age_mean, age_sd, dict(provenance))
    complete_cohort = Cohort(tuple(complete), age_mean, age_sd, dict(provenance))
    events = int(cohort.event_flags.sum())
    logger.info(f"Simulated {n} subjects: {cohort.n_records} measurements, {events} events "
                f"({100.0 * events / n:.1f}%), {sum(r.bmiz is None for s in cohort for r in s.records)} missing BMIZ")
    return SimCohort(cohort, complete_cohort, truth, np.array([l.b for l in latents]),
                     np.array(event_times), np.array([l.censor_time for l in latents]), bmi_records, reference)


def calibrate_baseline_level(truth: SimTruth, n: int, seed: int, target_event_fraction: float = 0.11) -> SimTruth:
    """Shift the baseline log hazard so that `target_event_fraction` of the subjects drawn with `seed` have events."""
    if not 0.0 < target_event_fraction < 1.0:
        raise ConfigError("target event fraction must lie in (0, 1)")
    latents, _, _ = _latents(truth, n, seed)
    ratios = np.empty(len(latents))
    for i, latent in enumerate(latents):
        entry = latent.subject.event.entry_time
        exposure = cumulative_hazard(latent.subject, truth.long_params, truth.surv_params, latent.b, entry,
                                     latent.censor_time, bmiz_trajectory(latent.subject))
        with np.errstate(divide="ignore"):
            ratios[i] = np.log(-np.log(latent.u) / exposure) if latent.u > 0 else np.inf
    shift = float(np.quantile(ratios, target_event_fraction))
    logger.info(f"Baseline level shifted by {shift:+.4f} for a {100 * target_event_fraction:.1f}% event fraction")
    return replace(truth, surv_params=truth.surv_params.scaled(np.exp(shift)))


def write_sim_cohort(sim: SimCohort, directory: Union[str, Path]) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / f"{name}.csv"
             for name in ("longitudinal", "survival", "bmi", "lms_reference", "truth", "truth_params")}
    write_cohort(sim.cohort, str(paths["longitudinal"]), str(paths["survival"]))
    pd.DataFrame([(r.subject_id, repr(r.time), repr(r.bmi)) for r in sim.bmi_records],
                 columns=["subject_id", "time", "bmi"]).to_csv(paths["bmi"], index=False)
    lms_frame(sim.lms_reference).to_csv(paths["lms_reference"], index=False)
    sim.truth_frame().to_csv(paths["truth"], index=False)
    sim.truth.to_frame().to_csv(paths["truth_params"], index=False)
    logger.info(f"Wrote simulated cohort to {directory}")
    return paths
