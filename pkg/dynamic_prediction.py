"""
Subject-specific dynamic event probabilities.

For each retained posterior draw the subject's random effects are drawn from
p(b | T > t_L, history up to t_L, theta), and the draw's event probability in
(t_L, t_L + dt] is 1 - exp(-Lambda(t_L, t_L + dt)). Point estimate and
credible interval are taken over draws.
"""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import optimize, stats

from bayes_engine import PosteriorDraws
from cohort_data import Subject
from config import PredictionConfig
from errors import JointRiskError, PredictionError, RangeError
from hazard_model import SurvivalParams, quadrature_nodes
from longitudinal_model import (
    LongitudinalParams, bmiz_trajectory, design_area, design_slope, design_value,
)
from performance_profiler import ComponentProfiler, profile_prediction

logger = logging.getLogger(__name__)


@dataclass
class PredictionRequest:
    subject: Subject
    landmark: float
    horizon: float = 1.0
    dt_grid: Tuple[float, ...] = ()
    n_mh_steps: int = 20
    max_draws: Optional[int] = None
    credible_level: float = 0.95
    seed: Union[int, np.random.SeedSequence] = 0

    @classmethod
    def from_config(cls, subject: Subject, landmark: float, horizon: float, config: PredictionConfig,
                    seed: int = 0, dt_grid: Sequence[float] = ()) -> "PredictionRequest":
        return cls(subject, landmark, horizon, tuple(dt_grid), config.n_mh_steps, config.max_draws,
                   config.credible_level, seed)


@dataclass
class PredictionResult:
    subject_id: str
    landmark: float
    horizon: float
    mean: float
    lower: float
    upper: float
    draws: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def to_row(self) -> Dict[str, object]:
        return {"subject_id": self.subject_id, "t_L": self.landmark, "dt": self.horizon,
                "pi_mean": self.mean, "pi_lo": self.lower, "pi_hi": self.upper}


def _summarize(values: np.ndarray, level: float) -> Tuple[float, float, float]:
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2])
    return float(np.mean(values)), float(lo), float(hi)


class _NodeBlock:
    """Quadrature nodes on an interval with their association designs."""

    def __init__(self, subject: Subject, t0: float, t1: float, breakpoints, terms, associations, trajectory,
                 extra_edges=()):
        edges = np.union1d(np.asarray(breakpoints, dtype=float), np.asarray(extra_edges, dtype=float))
        self.nodes, self.weights = quadrature_nodes(t0, t1, edges)
        self.X = {}
        self.Z = {}
        for a in associations:
            if a == "value":
                X, Z = design_value(subject, self.nodes, terms, trajectory)
            elif a == "slope":
                X, Z = design_slope(subject, self.nodes, terms)
            else:
                X, Z = design_area(subject, self.nodes, terms, trajectory)
            self.X[a], self.Z[a] = X, Z

    def parts(self, long_params: LongitudinalParams, surv_params: SurvivalParams, w: np.ndarray):
        """Offset c and loading G so that log hazard = c + G b at the nodes."""
        c = np.asarray(surv_params.baseline.log_hazard(self.nodes), dtype=float) + float(w @ surv_params.omega if w.size else 0.0)
        G = np.zeros((self.nodes.size, 2))
        for a, coef in surv_params.alpha.items():
            c = c + coef * (self.X[a] @ long_params.beta)
            G = G + coef * self.Z[a]
        return c, G


class SubjectPredictor:
    """Per-(subject, landmark) design cache shared by every posterior draw."""

    def __init__(self, subject: Subject, landmark: float, terms: Sequence[str], covariates: Sequence[str],
                 associations: Sequence[str], baseline_breaks=(), dt_grid: Sequence[float] = (),
                 include_survival: bool = True):
        self.subject = subject
        self.landmark = float(landmark)
        self.terms = tuple(terms)
        self.associations = tuple(associations)
        self.history = subject.history(landmark)
        trajectory = bmiz_trajectory(self.history)
        self.trajectory = trajectory
        if self.history.n_records:
            self.X, self.Z = design_value(self.history, self.history.times, self.terms, trajectory)
        else:
            self.X, self.Z = np.zeros((0, len(self.terms))), np.zeros((0, 2))
        self.y = self.history.values
        self.w = subject.covariate_vector(covariates)
        breaks = np.union1d(np.asarray(baseline_breaks, dtype=float), trajectory.breakpoints)
        entry = subject.event.entry_time
        use_past = include_survival and self.associations and landmark > entry
        self.past = _NodeBlock(subject, entry, landmark, breaks, self.terms, self.associations, trajectory) if use_past else None
        self.grid = np.unique(np.concatenate([[0.0], np.asarray(dt_grid, dtype=float)]))
        if np.any(self.grid < 0):
            raise PredictionError("prediction horizons must be >= 0")
        edges = self.landmark + self.grid
        self.future = _NodeBlock(subject, self.landmark, float(edges[-1]), breaks, self.terms, self.associations,
                                 trajectory, extra_edges=edges)
        self.segment = np.searchsorted(edges, self.future.nodes, side="left") - 1

    def _gaussian(self, long_params: LongitudinalParams, D: np.ndarray):
        s2 = long_params.sigma ** 2
        precision = self.Z.T @ self.Z / s2 + np.linalg.inv(D)
        r = self.y - self.X @ long_params.beta
        return r, s2, precision

    def sample_b(self, long_params: LongitudinalParams, surv_params: SurvivalParams, D: np.ndarray,
                 rng: np.random.Generator, n_steps: int = 20) -> np.ndarray:
        r, s2, precision = self._gaussian(long_params, D)
        if self.past is None or not surv_params.alpha:
            cov = np.linalg.inv(precision)
            mean = cov @ self.Z.T @ r / s2
            return rng.multivariate_normal(mean, cov)

        c, G = self.past.parts(long_params, surv_params, self.w)
        wts = self.past.weights
        D_inv = np.linalg.inv(D)

        def log_target(b):
            resid = r - self.Z @ b
            with np.errstate(over="ignore"):
                return float(-0.5 * resid @ resid / s2 - wts @ np.exp(c + G @ b) - 0.5 * b @ D_inv @ b)

        def gradient(b):
            with np.errstate(over="ignore"):
                e = wts * np.exp(c + G @ b)
            return self.Z.T @ (r - self.Z @ b) / s2 - G.T @ e - D_inv @ b

        def hessian(b):
            with np.errstate(over="ignore"):
                e = wts * np.exp(c + G @ b)
            return -(precision + (G * e[:, None]).T @ G)

        result = optimize.minimize(lambda b: -log_target(b), np.zeros(2), jac=lambda b: -gradient(b),
                                   hess=lambda b: -hessian(b), method="trust-exact")
        mode = result.x
        if not result.success or not np.all(np.isfinite(mode)) or not np.isfinite(log_target(mode)):
            logger.warning(f"Random-effect mode search failed for subject {self.subject.subject_id} "
                           f"({result.message}); starting from b = 0")
            mode = np.zeros(2)
            cov = np.linalg.inv(precision)
        else:
            cov = np.linalg.inv(-hessian(mode))
        cov = 0.5 * (cov + cov.T)
        proposal = stats.multivariate_normal(mean=mode, cov=cov)

        current = mode
        current_log = log_target(current) - proposal.logpdf(current)
        for _ in range(max(1, n_steps)):
            candidate = rng.multivariate_normal(mode, cov)
            candidate_log = log_target(candidate) - proposal.logpdf(candidate)
            if np.log(rng.uniform()) < candidate_log - current_log:
                current, current_log = candidate, candidate_log
        return current

    def cumulative_hazards(self, long_params: LongitudinalParams, surv_params: SurvivalParams,
                           b: np.ndarray) -> np.ndarray:
        """Lambda(t_L, t_L + g) for every g in the grid (first entry is 0)."""
        c, G = self.future.parts(long_params, surv_params, self.w)
        with np.errstate(over="ignore"):
            increments = np.bincount(self.segment, weights=self.future.weights * np.exp(c + G @ b),
                                     minlength=self.grid.size - 1)
        return np.concatenate([[0.0], np.cumsum(increments)])

    def eta_path(self, long_params: LongitudinalParams, b: np.ndarray, times: np.ndarray) -> np.ndarray:
        X, Z = design_value(self.history, times, self.terms, self.trajectory)
        return X @ long_params.beta + Z @ b


def _check_request(request: PredictionRequest, draws: PosteriorDraws, horizons: Sequence[float]):
    subject, t_L = request.subject, request.landmark
    if draws.n_draws == 0:
        raise PredictionError("no posterior draws")
    if t_L < subject.event.entry_time:
        raise PredictionError(f"subject {subject.subject_id} enters the risk set at "
                              f"{subject.event.entry_time:.4f}, after landmark {t_L}")
    if subject.event.event == 1 and subject.event.observed_time <= t_L:
        raise PredictionError(f"subject {subject.subject_id} had the event at {subject.event.observed_time:.4f}, "
                              f"not at risk at landmark {t_L}")
    if subject.event.event == 0 and subject.event.observed_time < t_L:
        raise PredictionError(f"subject {subject.subject_id} was censored at {subject.event.observed_time:.4f}, "
                              f"before landmark {t_L}; survival to the landmark is unknown")
    if subject.event.event == 0 and subject.event.observed_time == t_L:
        logger.warning(f"Subject {subject.subject_id}: follow-up ends at landmark {t_L}; "
                       f"taking the subject as event-free through the landmark")
    if not any(r.time <= t_L for r in subject.records):
        raise PredictionError(f"subject {subject.subject_id} has no measurements up to landmark {t_L}")
    if any(h < 0 for h in horizons):
        raise PredictionError("prediction horizon must be >= 0")
    upper = draws.basis.boundary[1]
    if t_L + max(horizons) > upper:
        raise RangeError(f"prediction window ends beyond the baseline support ({upper:.4f})",
                         location=t_L + max(horizons))


def _standardized(subject: Subject, draws: PosteriorDraws) -> Subject:
    return replace(subject, sage=(subject.age_entry - draws.age_mean) / draws.age_sd)


def _paired_draws(request: PredictionRequest, draws: PosteriorDraws, horizons: Sequence[float]):
    _check_request(request, draws, horizons)
    subject = _standardized(request.subject, draws)
    selected = draws.thinned(request.max_draws)
    predictor = SubjectPredictor(subject, request.landmark, draws.spec.longitudinal_terms,
                                 draws.spec.survival_covariates, draws.spec.association,
                                 draws.basis.interior_knots, horizons)
    rng = np.random.default_rng(request.seed)
    b_draws = np.zeros((selected.n_draws, 2))
    cumulative = np.zeros((selected.n_draws, predictor.grid.size))
    with ComponentProfiler("prediction", "paired_draws", {"subject": subject.subject_id, "draws": selected.n_draws}):
        for k in range(selected.n_draws):
            long_params, surv_params, D = selected.long_params(k), selected.surv_params(k), selected.D(k)
            b = predictor.sample_b(long_params, surv_params, D, rng, request.n_mh_steps)
            b_draws[k] = b
            cumulative[k] = predictor.cumulative_hazards(long_params, surv_params, b)
    return predictor, selected, b_draws, cumulative


def sample_conditional_random_effects(long_params: LongitudinalParams, surv_params: SurvivalParams,
                                      D: np.ndarray, subject: Subject, landmark: float,
                                      rng: np.random.Generator, n_steps: int = 20,
                                      include_survival: bool = True) -> np.ndarray:
    """One draw of b from p(b | T > t_L, history up to t_L, theta)."""
    predictor = SubjectPredictor(subject, landmark, long_params.terms, surv_params.covariates,
                                 tuple(surv_params.alpha), surv_params.baseline.breakpoints,
                                 include_survival=include_survival)
    return predictor.sample_b(long_params, surv_params, D, rng, n_steps)


@profile_prediction
def dynamic_event_probability(request: PredictionRequest, draws: PosteriorDraws) -> PredictionResult:
    predictor, _, _, cumulative = _paired_draws(request, draws, [request.horizon])
    column = int(np.searchsorted(predictor.grid, request.horizon))
    values = -np.expm1(-cumulative[:, column])
    mean, lo, hi = _summarize(values, request.credible_level)
    return PredictionResult(request.subject.subject_id, request.landmark, request.horizon, mean, lo, hi, values)


@profile_prediction
def prediction_curve(request: PredictionRequest, draws: PosteriorDraws) -> List[PredictionResult]:
    """Event probabilities over request.dt_grid with shared b draws per posterior draw."""
    grid = list(request.dt_grid) or [request.horizon]
    predictor, _, _, cumulative = _paired_draws(request, draws, grid)
    probabilities = -np.expm1(-cumulative)
    results = []
    for dt in grid:
        values = probabilities[:, int(np.searchsorted(predictor.grid, dt))]
        mean, lo, hi = _summarize(values, request.credible_level)
        results.append(PredictionResult(request.subject.subject_id, request.landmark, float(dt), mean, lo, hi, values))
    return results


@profile_prediction
def predict_trajectory(request: PredictionRequest, draws: PosteriorDraws, grid: Sequence[float]) -> pd.DataFrame:
    """Posterior mean and credible band of eta(t) over `grid` given the history."""
    predictor, selected, b_draws, _ = _paired_draws(request, draws, [request.horizon])
    times = np.asarray(grid, dtype=float)
    paths = np.vstack([predictor.eta_path(selected.long_params(k), b_draws[k], times)
                       for k in range(selected.n_draws)])
    level = request.credible_level
    return pd.DataFrame({
        "subject_id": request.subject.subject_id,
        "t_L": request.landmark,
        "time": times,
        "eta_mean": paths.mean(axis=0),
        "eta_lo": np.quantile(paths, (1 - level) / 2, axis=0),
        "eta_hi": np.quantile(paths, (1 + level) / 2, axis=0),
    })


PREDICTION_COLUMNS = ["subject_id", "t_L", "dt", "pi_mean", "pi_lo", "pi_hi", "error"]


@dataclass
class PredictionBatch:
    frame: pd.DataFrame
    per_draw: pd.DataFrame


def _predict_one(draws: PosteriorDraws, subject: Subject, landmark: float, horizons: Sequence[float],
                 config: PredictionConfig, seed: np.random.SeedSequence):
    request = PredictionRequest(subject, landmark, max(horizons), tuple(horizons), config.n_mh_steps,
                                config.max_draws, config.credible_level, seed)
    try:
        results = prediction_curve(request, draws)
    except JointRiskError as e:
        logger.warning(f"Prediction failed for subject {subject.subject_id} at t_L={landmark}: {e}")
        rows = [{"subject_id": subject.subject_id, "t_L": landmark, "dt": dt, "pi_mean": np.nan,
                 "pi_lo": np.nan, "pi_hi": np.nan, "error": str(e)} for dt in horizons]
        return rows, []
    return [dict(r.to_row(), error="") for r in results], results


async def _predict_async(draws, subjects, landmarks, horizons, config, seed, threads):
    jobs = [(s, t_L) for s in subjects for t_L in landmarks]
    seeds = np.random.SeedSequence(seed).spawn(len(jobs))
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tasks = [loop.run_in_executor(pool, _predict_one, draws, s, t_L, horizons, config, seeds[j])
                 for j, (s, t_L) in enumerate(jobs)]
        return await asyncio.gather(*tasks)


def predict_batch(draws: PosteriorDraws, subjects: Sequence[Subject], landmarks: Sequence[float],
                  horizons: Sequence[float], config: Optional[PredictionConfig] = None,
                  seed: int = 0, threads: int = 1) -> PredictionBatch:
    """Predictions for every (subject, landmark, horizon); failures become error rows."""
    config = config or PredictionConfig()
    with ComponentProfiler("prediction", "batch", {"subjects": len(subjects), "landmarks": len(landmarks)}):
        chunks = asyncio.run(_predict_async(draws, list(subjects), list(landmarks), list(horizons),
                                            config, seed, threads))
    rows = [row for chunk, _ in chunks for row in chunk]
    draw_rows = [
        {"subject_id": r.subject_id, "t_L": r.landmark, "dt": r.horizon, "draw": k, "pi": float(v)}
        for _, results in chunks for r in results for k, v in enumerate(r.draws)
    ]
    return PredictionBatch(pd.DataFrame(rows, columns=PREDICTION_COLUMNS),
                           pd.DataFrame(draw_rows, columns=["subject_id", "t_L", "dt", "draw", "pi"]))


def predict_subjects(draws: PosteriorDraws, subjects: Sequence[Subject], landmarks: Sequence[float],
                     horizons: Sequence[float], config: Optional[PredictionConfig] = None,
                     seed: int = 0, threads: int = 1) -> pd.DataFrame:
    return predict_batch(draws, subjects, landmarks, horizons, config, seed, threads).frame
