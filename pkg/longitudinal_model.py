"""
Linear mixed-effects sub-model for the log biomarker trajectory.

eta_i(t) = x_i(t)' beta + b0 + b1 t, with BMIZ entering as a last-observation-
carried-forward step function, so the slope excludes BMIZ and the integral is
exact per segment.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from cohort_data import Cohort, Subject
from errors import CohortDataError, RangeError
from mixed_model import MixedModelFit, fit_linear_mixed_model
from model_spec import ModelSpec

logger = logging.getLogger(__name__)

RANDOM_TERMS = ("intercept", "time")


@dataclass(frozen=True)
class LongitudinalParams:
    terms: Tuple[str, ...]
    beta: np.ndarray
    sigma: float

    def coef(self, term: str) -> float:
        return float(self.beta[self.terms.index(term)]) if term in self.terms else 0.0

    @classmethod
    def from_mapping(cls, beta: dict, sigma: float) -> "LongitudinalParams":
        terms = tuple(beta)
        return cls(terms, np.array([beta[t] for t in terms], dtype=float), float(sigma))


class BmizTrajectory:
    """Step function through (time, BMIZ) pairs; the first value also covers [0, s_0)."""

    def __init__(self, times: Sequence[float], values: Sequence[float]):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._jumps = np.diff(self.values)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.times[1:]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.values.size == 0:
            return np.zeros_like(t)
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, None)
        return self.values[idx]

    def cumulative(self, t):
        """Integral of the step function from 0 to t."""
        t = np.asarray(t, dtype=float)
        if self.values.size == 0:
            return np.zeros_like(t)
        steps = np.clip(t[..., None] - self.times[1:], 0.0, None) @ self._jumps
        return self.values[0] * t + steps

    def integral(self, t0, t1):
        return self.cumulative(t1) - self.cumulative(t0)


def bmiz_trajectory(subject: Subject) -> BmizTrajectory:
    pairs = [(r.time, r.bmiz) for r in subject.records if r.bmiz is not None]
    return BmizTrajectory([p[0] for p in pairs], [p[1] for p in pairs])


def require_bmiz(cohort: Cohort, spec: ModelSpec):
    if not spec.uses_bmiz:
        return
    incomplete = [s.subject_id for s in cohort if not s.has_complete_bmiz]
    if incomplete:
        raise CohortDataError(f"{len(incomplete)} subject(s) have missing BMIZ (first: {incomplete[:5]}); "
                              "run the imputation step first")


def design_value(subject: Subject, t, terms: Sequence[str], bmiz_at: Optional[BmizTrajectory] = None):
    """Fixed and random design rows of eta(t)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    columns = {
        "intercept": np.ones_like(t),
        "time": t,
        "sex": np.full_like(t, float(subject.sex)),
        "sage": np.full_like(t, subject.sage),
    }
    if "bmiz" in terms:
        columns["bmiz"] = (bmiz_at or bmiz_trajectory(subject))(t)
    X = np.column_stack([columns[name] for name in terms])
    Z = np.column_stack([np.ones_like(t), t])
    return X, Z


def design_slope(subject: Subject, t, terms: Sequence[str]):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.zeros((t.size, len(terms)))
    if "time" in terms:
        X[:, terms.index("time")] = 1.0
    Z = np.column_stack([np.zeros_like(t), np.ones_like(t)])
    return X, Z


def design_area(subject: Subject, t, terms: Sequence[str], bmiz_at: Optional[BmizTrajectory] = None):
    """Design rows of the integral of eta from 0 to t."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half_sq = 0.5 * t * t
    columns = {
        "intercept": t,
        "time": half_sq,
        "sex": float(subject.sex) * t,
        "sage": subject.sage * t,
    }
    if "bmiz" in terms:
        columns["bmiz"] = (bmiz_at or bmiz_trajectory(subject)).cumulative(t)
    X = np.column_stack([columns[name] for name in terms])
    Z = np.column_stack([t, half_sq])
    return X, Z


def eta(subject: Subject, params: LongitudinalParams, b, t, bmiz_at: Optional[BmizTrajectory] = None):
    X, Z = design_value(subject, t, params.terms, bmiz_at)
    value = X @ params.beta + Z @ np.asarray(b, dtype=float)
    return float(value[0]) if np.ndim(t) == 0 else value


def eta_slope(subject: Subject, params: LongitudinalParams, b, t=0.0):
    slope = params.coef("time") + float(np.asarray(b, dtype=float)[1])
    if np.ndim(t) == 0:
        return slope
    return np.full(np.shape(t), slope)


def eta_integral(subject: Subject, params: LongitudinalParams, b, t0, t1,
                 bmiz_at: Optional[BmizTrajectory] = None):
    if np.any(np.asarray(t0) < 0) or np.any(np.asarray(t1) < np.asarray(t0)):
        raise RangeError("eta_integral needs 0 <= t0 <= t1")
    trajectory = bmiz_at or bmiz_trajectory(subject)
    X1, Z1 = design_area(subject, t1, params.terms, trajectory)
    X0, Z0 = design_area(subject, t0, params.terms, trajectory)
    b = np.asarray(b, dtype=float)
    value = (X1 - X0) @ params.beta + (Z1 - Z0) @ b
    return float(value[0]) if np.ndim(t1) == 0 and np.ndim(t0) == 0 else value


def longitudinal_loglik(subject: Subject, params: LongitudinalParams, b) -> float:
    """Sum of Gaussian log densities of the subject's measurements given b."""
    if not params.sigma > 0:
        raise RangeError(f"residual sd must be positive, got {params.sigma}")
    mean = eta(subject, params, b, subject.times)
    return float(np.sum(stats.norm.logpdf(subject.values, loc=mean, scale=params.sigma)))


def random_effects_blup(subject: Subject, params: LongitudinalParams, D: np.ndarray):
    """Conditional mean and covariance of b given the subject's measurements."""
    X, Z = design_value(subject, subject.times, params.terms)
    s2 = params.sigma ** 2
    precision = Z.T @ Z / s2 + np.linalg.inv(D)
    cov = np.linalg.inv(precision)
    mean = cov @ Z.T @ (subject.values - X @ params.beta) / s2
    return mean, cov


def stack_design(cohort: Cohort, terms: Sequence[str]):
    """Stacked (y, X, Z, group) of every measurement in the cohort."""
    ys, Xs, Zs, groups = [], [], [], []
    for subject in cohort:
        X, Z = design_value(subject, subject.times, terms)
        ys.append(subject.values)
        Xs.append(X)
        Zs.append(Z)
        groups.extend([subject.subject_id] * subject.n_records)
    return np.concatenate(ys), np.vstack(Xs), np.vstack(Zs), groups


def fit_longitudinal_lmm(cohort: Cohort, spec: ModelSpec) -> Tuple[LongitudinalParams, np.ndarray, MixedModelFit]:
    """Standalone ML fit of the biomarker sub-model (sampler warm start)."""
    require_bmiz(cohort, spec)
    y, X, Z, groups = stack_design(cohort, spec.longitudinal_terms)
    fit = fit_linear_mixed_model(y, X, Z, groups, spec.longitudinal_terms, RANDOM_TERMS)
    params = LongitudinalParams(tuple(fit.x_names), fit.beta, float(np.sqrt(fit.residual_variance)))
    logger.info("Longitudinal LMM: " + ", ".join(f"{t}={v:.4f}" for t, v in zip(params.terms, params.beta))
                + f", sigma={params.sigma:.4f}")
    return params, fit.random_effects_cov, fit
