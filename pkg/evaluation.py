"""
Predictive accuracy and model comparison.

Kaplan-Meier curves (with delayed entry), inverse-probability-of-censoring
weighted time-dependent AUC and Brier score, pointwise posterior log
likelihoods for WAIC / LPML, and the stratified cross-validation harness.
"""

import asyncio
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import arviz as az
import numpy as np
import pandas as pd
from lifelines import KaplanMeierFitter
from scipy.special import logsumexp
from sklearn.model_selection import StratifiedKFold

from bayes_engine import JointData, PosteriorDraws, build_basis, run_mcmc
from cohort_data import Cohort, subset_cohort
from config import RunConfig
from dynamic_prediction import predict_subjects
from errors import ConfigError, PredictionError, RangeError, UndefinedMetricError
from model_spec import ModelSpec
from performance_profiler import ComponentProfiler, profile_evaluation

logger = logging.getLogger(__name__)

SurvivalData = Union[Cohort, Tuple[Sequence[float], Sequence[int]]]


@dataclass
class KmCurve:
    """Product-limit step function; survival[j] holds on [times[j], times[j+1])."""
    times: np.ndarray
    survival: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        values = np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0) if self.times.size else np.ones_like(t)
        return float(values) if values.ndim == 0 else values

    def left(self, t):
        """S(t-), the value just before t."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left") - 1
        values = np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0) if self.times.size else np.ones_like(t)
        return float(values) if values.ndim == 0 else values


def kaplan_meier(times: Sequence[float], events: Sequence[int],
                 entry: Optional[Sequence[float]] = None) -> KmCurve:
    """Product-limit estimate from lifelines; with `entry`, subject i joins the risk set at entry_i."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise UndefinedMetricError("Kaplan-Meier needs at least one observation")
    if np.any(times < 0):
        raise RangeError("Kaplan-Meier times must be >= 0", location=float(times[times < 0][0]))
    if entry is not None:
        entry = np.asarray(entry, dtype=float)
        if np.any(entry > times):
            raise RangeError("entry after exit in Kaplan-Meier input", location=float(entry[entry > times][0]))
    kmf = KaplanMeierFitter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        with np.errstate(divide="ignore", invalid="ignore"):
            kmf.fit(times, event_observed=events, entry=entry)
    for w in caught:
        logger.debug(f"KaplanMeierFitter: {w.message}")
    grid = np.unique(times)
    table = kmf.event_table.loc[grid]
    survival = kmf.survival_function_.loc[grid].iloc[:, 0].to_numpy(dtype=float)
    return KmCurve(grid, survival,
                   table["at_risk"].to_numpy().round().astype(int),
                   table["observed"].to_numpy().round().astype(int))


def km_table(curve: KmCurve) -> pd.DataFrame:
    frame = pd.DataFrame({"time": curve.times, "survival": curve.survival,
                          "n_risk": curve.n_risk, "n_event": curve.n_event})
    if curve.times.size == 0 or curve.times[0] > 0:
        start = pd.DataFrame({"time": [0.0], "survival": [1.0],
                              "n_risk": [int(curve.n_risk[0]) if curve.n_risk.size else 0], "n_event": [0]})
        frame = pd.concat([start, frame], ignore_index=True)
    return frame


def _unpack(data: SurvivalData) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(data, Cohort):
        return data.observed_times, data.event_flags, data.entry_times
    times, events = data
    times = np.asarray(times, dtype=float)
    return times, np.asarray(events, dtype=int), np.zeros_like(times)


@dataclass
class WindowLabels:
    landmark: float
    horizon: float
    at_risk: np.ndarray
    in_window: np.ndarray  # event in (t_L, t_L + dt]
    event_free: np.ndarray  # T > t_L + dt
    weights: np.ndarray
    flagged: np.ndarray  # censoring KM was 0 where a weight was needed

    @property
    def n_at_risk(self) -> int:
        return int(self.at_risk.sum())

    @property
    def n_events(self) -> int:
        return int(self.in_window.sum())

    def restricted(self, keep: np.ndarray) -> "WindowLabels":
        """Labels with the subjects outside `keep` removed from every set."""
        keep = np.asarray(keep, dtype=bool)
        return WindowLabels(self.landmark, self.horizon, self.at_risk & keep, self.in_window & keep,
                            self.event_free & keep, np.where(keep, self.weights, 0.0), self.flagged & keep)


def ipcw_weights(data: SurvivalData, landmark: float, horizon: float) -> WindowLabels:
    """Window labels and IPCW weights from the censoring-time KM conditioned on T > t_L."""
    if landmark < 0 or horizon < 0:
        raise RangeError("landmark and horizon must be >= 0")
    times, events, entry = _unpack(data)
    end = landmark + horizon
    at_risk = (times > landmark) & (entry <= landmark)
    in_window = at_risk & (times <= end) & (events == 1)
    event_free = at_risk & (times > end)

    censoring = kaplan_meier(times, 1 - events, entry)
    k_landmark = censoring(landmark)
    k_end = censoring(end)
    k_case = censoring.left(times)
    weights = np.zeros(times.size)
    flagged = np.zeros(times.size, dtype=bool)
    if k_landmark > 0:
        if k_end > 0:
            weights[event_free] = k_landmark / k_end
        else:
            flagged |= event_free
        ok = in_window & (k_case > 0)
        weights[ok] = k_landmark / k_case[ok]
        flagged |= in_window & ~(k_case > 0)
    else:
        flagged |= in_window | event_free
    if flagged.any():
        logger.warning(f"Censoring survival is 0 for {int(flagged.sum())} subject(s) at t_L={landmark}, "
                       f"dt={horizon}; their weights are set to 0")
    return WindowLabels(landmark, horizon, at_risk, in_window, event_free, weights, flagged)


def _labels_and_predictions(predictions, data, landmark, horizon, skip_missing):
    labels = ipcw_weights(data, landmark, horizon)
    pi = np.asarray(predictions, dtype=float)
    if pi.shape != labels.weights.shape:
        raise PredictionError(f"expected {labels.weights.size} predictions, got {pi.size}")
    missing = np.isnan(pi) & labels.at_risk
    if missing.any():
        if not skip_missing:
            raise PredictionError(f"{int(missing.sum())} at-risk subject(s) lack a prediction")
        labels = labels.restricted(~missing)
    return labels, pi


def auc_ipcw(predictions: Sequence[float], data: SurvivalData, landmark: float, horizon: float,
             skip_missing: bool = False) -> float:
    """Weighted concordance of in-window cases against event-free controls; ties count 1/2."""
    labels, pi = _labels_and_predictions(predictions, data, landmark, horizon, skip_missing)
    cases = labels.in_window & (labels.weights > 0)
    controls = labels.event_free & (labels.weights > 0)
    pair_w = labels.weights[cases][:, None] * labels.weights[controls][None, :]
    denominator = float(pair_w.sum())
    if denominator == 0.0:
        raise UndefinedMetricError(f"no comparable pairs at t_L={landmark}, dt={horizon}")
    diff = pi[cases][:, None] - pi[controls][None, :]
    concordant = (diff > 0).astype(float) + 0.5 * (diff == 0)
    return float((pair_w * concordant).sum() / denominator)


def brier_ipcw(predictions: Sequence[float], data: SurvivalData, landmark: float, horizon: float,
               skip_missing: bool = False) -> float:
    """Weighted squared error over the risk set at t_L.

    The sum of w_i (D_i - pi_i)^2 is divided by the number of subjects at risk
    (entry <= t_L < T). The usual form divides by n S(t_L) with S the empirical
    proportion of observed times beyond t_L, i.e. the count with T > t_L; the two
    agree once every subject has entered by t_L, and subjects entering after the
    landmark are left out of both the sum and the denominator here.
    """
    labels, pi = _labels_and_predictions(predictions, data, landmark, horizon, skip_missing)
    n_at_risk = labels.n_at_risk
    if n_at_risk == 0:
        raise UndefinedMetricError(f"empty risk set at t_L={landmark}")
    idx = labels.at_risk
    outcome = labels.in_window[idx].astype(float)
    return float(np.sum(labels.weights[idx] * (outcome - pi[idx]) ** 2) / n_at_risk)


def _aligned_b(draws: PosteriorDraws, cohort: Cohort) -> np.ndarray:
    try:
        idx = [draws.subject_index(sid) for sid in cohort.subject_ids]
    except ValueError:
        missing = [sid for sid in cohort.subject_ids if sid not in draws.subject_ids]
        raise PredictionError(f"draws carry no random effects for subjects {missing[:5]}") from None
    return draws.b[:, idx, :]


@profile_evaluation
def pointwise_loglik(draws: PosteriorDraws, cohort: Cohort, mode: str = "conditional",
                     n_samples: int = 200, seed: int = 0) -> np.ndarray:
    """(draws, subjects) matrix of log p(D_i | theta^(k)).

    "conditional" evaluates at the stored b_i^(k); "marginal" integrates b
    out by Monte Carlo over N(0, D^(k)).
    """
    if mode not in ("conditional", "marginal"):
        raise ConfigError(f"unknown pointwise mode '{mode}'")
    data = JointData(cohort, draws.spec, draws.basis, penalty_order=draws.penalty_order)
    result = np.zeros((draws.n_draws, data.n))
    if mode == "conditional":
        b_all = _aligned_b(draws, cohort)
        for k in range(draws.n_draws):
            state = draws.state(k)
            state.b = b_all[k]
            result[k] = data.subject_loglik(state)
        return result
    rng = np.random.default_rng(seed)
    for k in range(draws.n_draws):
        state = draws.state(k)
        chol = np.linalg.cholesky(state.D)
        samples = np.empty((n_samples, data.n))
        for s in range(n_samples):
            state.b = rng.standard_normal((data.n, 2)) @ chol.T
            samples[s] = data.subject_loglik(state)
        result[k] = logsumexp(samples, axis=0) - np.log(n_samples)
    return result


@dataclass
class WaicResult:
    waic: float
    lppd: float
    p_waic: float


@dataclass
class LpmlResult:
    lpml: float
    log_cpo: np.ndarray
    unstable: List[int] = field(default_factory=list)

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.log_cpo)


def _loglik_data(loglik: np.ndarray) -> az.InferenceData:
    """One-chain InferenceData holding the (draws, subjects) log-likelihood matrix."""
    return az.from_dict(log_likelihood={"subject": loglik[None, :, :]})


def _logged(fn, *args, **kwargs):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fn(*args, **kwargs)
    for w in caught:
        logger.warning(f"arviz: {w.message}")
    return result


def waic_from_loglik(loglik: np.ndarray) -> WaicResult:
    loglik = np.asarray(loglik, dtype=float)
    if loglik.shape[0] < 2:
        raise UndefinedMetricError("WAIC needs at least 2 draws")
    result = _logged(az.waic, _loglik_data(loglik), scale="log")
    elpd, p_waic = float(result["elpd_waic"]), float(result["p_waic"])
    return WaicResult(-2.0 * elpd, elpd + p_waic, p_waic)


def lpml_from_loglik(loglik: np.ndarray) -> LpmlResult:
    """Harmonic-mean CPO per subject; LPML is their log sum."""
    loglik = np.asarray(loglik, dtype=float)
    if loglik.shape[0] < 1:
        raise UndefinedMetricError("LPML needs at least 1 draw")
    with np.errstate(invalid="ignore"):
        log_cpo = -(logsumexp(-loglik, axis=0) - np.log(loglik.shape[0]))
    unstable = [int(i) for i in np.flatnonzero(~np.isfinite(log_cpo) | np.any(np.isneginf(loglik), axis=0))]
    if unstable:
        logger.warning(f"CPO unstable for {len(unstable)} subject(s) (zero likelihood in some draw)")
    return LpmlResult(float(np.sum(log_cpo)), log_cpo, unstable)


@dataclass
class LooResult:
    elpd_loo: float
    p_loo: float
    pareto_k: np.ndarray

    @property
    def max_pareto_k(self) -> float:
        return float(np.max(self.pareto_k)) if self.pareto_k.size else float("nan")


def psis_loo_from_loglik(loglik: np.ndarray) -> LooResult:
    """Pareto-smoothed importance-sampling LOO; draws are treated as independent (reff = 1)."""
    loglik = np.asarray(loglik, dtype=float)
    if loglik.shape[0] < 2:
        raise UndefinedMetricError("PSIS-LOO needs at least 2 draws")
    result = _logged(az.loo, _loglik_data(loglik), pointwise=True, reff=1.0, scale="log")
    return LooResult(float(result["elpd_loo"]), float(result["p_loo"]),
                     np.asarray(result["pareto_k"], dtype=float))


def waic(draws: PosteriorDraws, cohort: Cohort, mode: str = "conditional", n_samples: int = 200) -> WaicResult:
    return waic_from_loglik(pointwise_loglik(draws, cohort, mode, n_samples))


def lpml(draws: PosteriorDraws, cohort: Cohort, mode: str = "conditional", n_samples: int = 200) -> LpmlResult:
    return lpml_from_loglik(pointwise_loglik(draws, cohort, mode, n_samples))


@profile_evaluation
def compare_models(fits: Dict[str, PosteriorDraws], cohort: Cohort, mode: str = "conditional",
                   n_samples: int = 200) -> pd.DataFrame:
    """One row per model with WAIC and LPML; best values flagged."""
    if len(fits) < 2:
        raise ConfigError("model comparison needs at least 2 fitted models")
    rows = []
    for name, draws in fits.items():
        loglik = pointwise_loglik(draws, cohort, mode, n_samples)
        w, l, loo = waic_from_loglik(loglik), lpml_from_loglik(loglik), psis_loo_from_loglik(loglik)
        rows.append({"model": name, "waic": w.waic, "lppd": w.lppd, "p_waic": w.p_waic,
                     "lpml": l.lpml, "n_unstable_cpo": len(l.unstable),
                     "elpd_loo": loo.elpd_loo, "max_pareto_k": loo.max_pareto_k})
        logger.info(f"Model {name}: WAIC={w.waic:.2f} (p_WAIC={w.p_waic:.2f}), LPML={l.lpml:.2f}")
    frame = pd.DataFrame(rows)
    frame["best_waic"] = frame["waic"] == frame["waic"].min()
    frame["best_lpml"] = frame["lpml"] == frame["lpml"].max()
    return frame


@dataclass
class MetricReport:
    """Per-fold AUC / Brier values; undefined cells are NaN."""
    values: pd.DataFrame  # fold, t_L, dt, metric, value, n_at_risk, n_events
    landmarks: List[float]
    horizons: List[float]

    def summary(self) -> pd.DataFrame:
        grouped = self.values.groupby(["t_L", "dt", "metric"])["value"]
        return grouped.agg(mean="mean", sd="std", n_folds="count").reset_index()

    def table(self, digits: int = 3) -> pd.DataFrame:
        """Rows t_L, columns metric x dt, cells "mean (sd)" or NA."""
        summary = self.summary()
        rows = []
        for t_L in self.landmarks:
            row = {"t_L": t_L}
            for metric in ("AUC", "BS"):
                for dt in self.horizons:
                    cell = summary[(summary["t_L"] == t_L) & (summary["dt"] == dt) & (summary["metric"] == metric)]
                    if cell.empty or cell["n_folds"].iloc[0] == 0:
                        row[f"{metric} dt={dt:g}"] = "NA"
                        continue
                    mean, sd = cell["mean"].iloc[0], cell["sd"].iloc[0]
                    sd_text = "NA" if np.isnan(sd) else f"{sd:.{digits}f}"
                    row[f"{metric} dt={dt:g}"] = f"{mean:.{digits}f} ({sd_text})"
            rows.append(row)
        return pd.DataFrame(rows)


def _score(metric_fn, pi, cohort, t_L, dt) -> float:
    try:
        return metric_fn(pi, cohort, t_L, dt, skip_missing=True)
    except UndefinedMetricError as e:
        logger.warning(f"Metric not computable: {e}")
        return float("nan")


def _run_fold(fold: int, train_ids: List[str], test_ids: List[str], cohort: Cohort, spec: ModelSpec,
              landmarks: Sequence[float], horizons: Sequence[float], config: RunConfig,
              seed: np.random.SeedSequence) -> List[Dict[str, object]]:
    train, test = subset_cohort(cohort, train_ids), subset_cohort(cohort, test_ids)
    fold_seed = int(seed.generate_state(1)[0])
    mcmc = config.mcmc.model_copy(update={"seed": fold_seed, "threads": 1})
    with ComponentProfiler("evaluation", "fold", {"fold": fold, "train": len(train), "test": len(test)}):
        draws = run_mcmc(train, spec, config.prior, mcmc, config.spline, build_basis(train, config.spline))
        parts = []
        for t_L in landmarks:
            at_risk = [s for s in test if s.event.entry_time <= t_L < s.event.observed_time]
            if at_risk:
                parts.append(predict_subjects(draws, at_risk, [t_L], horizons, config.prediction, fold_seed))
    predictions = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(
        columns=["subject_id", "t_L", "dt", "pi_mean"])
    rows = []
    for t_L in landmarks:
        for dt in horizons:
            cell = predictions[(predictions["t_L"] == t_L) & (predictions["dt"] == dt)]
            pi = cell.set_index("subject_id")["pi_mean"].reindex(test.subject_ids).to_numpy(dtype=float)
            labels = ipcw_weights(test, t_L, dt)
            for name, fn in (("AUC", auc_ipcw), ("BS", brier_ipcw)):
                rows.append({"fold": fold, "t_L": t_L, "dt": dt, "metric": name,
                             "value": _score(fn, pi, test, t_L, dt),
                             "n_at_risk": labels.n_at_risk, "n_events": labels.n_events})
    logger.info(f"Fold {fold} done ({len(train)} train / {len(test)} test subjects)")
    return rows


async def _run_folds(jobs, threads):
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return await asyncio.gather(*[loop.run_in_executor(pool, _run_fold, *job) for job in jobs])


@profile_evaluation
def cross_validate(cohort: Cohort, spec: ModelSpec, config: Optional[RunConfig] = None,
                   folds: Optional[int] = None, landmarks: Optional[Sequence[float]] = None,
                   horizons: Optional[Sequence[float]] = None) -> MetricReport:
    """Event-stratified K-fold fit / predict / score loop."""
    config = config or RunConfig()
    folds = folds or config.evaluation.folds
    landmarks = list(landmarks or config.evaluation.landmarks)
    horizons = list(horizons or config.evaluation.horizons)
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=config.seed % (2 ** 32))
    ids = np.array(cohort.subject_ids)
    try:
        splits = list(splitter.split(ids, cohort.event_flags))
    except ValueError as e:
        raise ConfigError(f"cannot build {folds} stratified folds: {e}") from None
    seeds = np.random.SeedSequence(config.seed).spawn(folds)
    jobs = [(f, ids[train].tolist(), ids[test].tolist(), cohort, spec, landmarks, horizons, config, seeds[f])
            for f, (train, test) in enumerate(splits)]
    logger.info(f"Cross-validating model {spec.name}: {folds} folds, landmarks={landmarks}, horizons={horizons}")
    results = asyncio.run(_run_folds(jobs, config.threads))
    frame = pd.DataFrame([row for rows in results for row in rows])
    return MetricReport(frame, landmarks, horizons)
