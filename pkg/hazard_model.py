"""
Survival sub-model: B-spline log baseline hazard, baseline covariates and the
value / slope / area association terms, integrated by composite Gauss-Legendre
quadrature with delayed entry.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline

from cohort_data import Subject
from errors import NumericalError, RangeError
from longitudinal_model import (
    BmizTrajectory, LongitudinalParams, bmiz_trajectory, eta, eta_integral, eta_slope,
)

logger = logging.getLogger(__name__)

GAUSS_LEGENDRE_NODES = 15


@dataclass(frozen=True)
class SplineBasis:
    knots: np.ndarray  # full knot vector including repeated boundary knots
    degree: int = 3

    @classmethod
    def from_event_times(cls, event_times: Sequence[float], upper: float, n_interior: int = 9,
                         degree: int = 3) -> "SplineBasis":
        """Interior knots at event-time quantiles, boundary knots at 0 and `upper`."""
        if not upper > 0:
            raise RangeError(f"spline upper boundary must be positive, got {upper}")
        events = np.asarray(event_times, dtype=float)
        events = events[(events > 0) & (events < upper)]
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        if events.size >= n_interior:
            interior = np.quantile(events, probs)
        else:
            interior = probs * upper
        interior = np.unique(interior[(interior > 0) & (interior < upper)])
        knots = np.concatenate([np.zeros(degree + 1), interior, np.full(degree + 1, float(upper))])
        return cls(knots, degree)

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def boundary(self) -> Tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])

    @property
    def interior_knots(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.unique(self.knots[(self.knots > lo) & (self.knots < hi)])

    @cached_property
    def _spline(self) -> BSpline:
        return BSpline(self.knots, np.eye(self.n_basis), self.degree, extrapolate=False)


def bspline_basis(t, basis: SplineBasis) -> np.ndarray:
    """Basis values at t: shape (Q,) for scalar t, (n, Q) for arrays."""
    t_arr = np.asarray(t, dtype=float)
    lo, hi = basis.boundary
    if np.any(t_arr < lo) or np.any(t_arr > hi) or not np.all(np.isfinite(t_arr)):
        bad = t_arr[(t_arr < lo) | (t_arr > hi) | ~np.isfinite(t_arr)].ravel()[0]
        raise RangeError(f"time outside spline support [{lo}, {hi}]", location=float(bad))
    values = basis._spline(t_arr)
    return np.nan_to_num(values, nan=0.0)


def difference_penalty(n_basis: int, order: int = 2) -> np.ndarray:
    """Random-walk penalty matrix K = Delta' Delta."""
    delta = np.diff(np.eye(n_basis), n=order, axis=0)
    return delta.T @ delta


def log_baseline_hazard(t, gamma: np.ndarray, basis: SplineBasis):
    return bspline_basis(t, basis) @ np.asarray(gamma, dtype=float)


class Baseline:
    """Common interface of the baseline hazards."""
    support: Tuple[float, float] = (0.0, np.inf)

    def log_hazard(self, t):
        raise NotImplementedError

    @property
    def breakpoints(self) -> np.ndarray:
        return np.empty(0)


@dataclass(frozen=True)
class SplineBaseline(Baseline):
    basis: SplineBasis
    gamma: np.ndarray

    @property
    def support(self) -> Tuple[float, float]:
        return self.basis.boundary

    def log_hazard(self, t):
        return log_baseline_hazard(t, self.gamma, self.basis)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.basis.interior_knots


@dataclass(frozen=True)
class ConstantBaseline(Baseline):
    log_rate: float = 0.0

    def log_hazard(self, t):
        return np.full(np.shape(t), self.log_rate) if np.ndim(t) else self.log_rate

    def cumulative(self, t0, t1):
        return np.exp(self.log_rate) * (np.asarray(t1) - np.asarray(t0))


@dataclass(frozen=True)
class WeibullBaseline(Baseline):
    """lambda0(t) = rho k t^(k-1)."""
    shape: float
    rate: float

    def log_hazard(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            value = np.log(self.rate * self.shape) + (self.shape - 1.0) * np.log(t)
        return float(value) if value.ndim == 0 else value

    def cumulative(self, t0, t1):
        return self.rate * (np.power(t1, self.shape) - np.power(t0, self.shape))


@dataclass(frozen=True)
class GompertzBaseline(Baseline):
    """lambda0(t) = a exp(c t)."""
    log_scale: float
    growth: float

    def log_hazard(self, t):
        value = self.log_scale + self.growth * np.asarray(t, dtype=float)
        return float(value) if np.ndim(value) == 0 else value

    def cumulative(self, t0, t1):
        if self.growth == 0:
            return np.exp(self.log_scale) * (np.asarray(t1) - np.asarray(t0))
        return np.exp(self.log_scale) * (np.exp(self.growth * np.asarray(t1)) - np.exp(self.growth * np.asarray(t0))) / self.growth


@dataclass(frozen=True)
class SurvivalParams:
    covariates: Tuple[str, ...]
    omega: np.ndarray
    alpha: Dict[str, float]  # active associations only
    baseline: Baseline
    tau: Optional[float] = None

    def linear_predictor(self, subject: Subject) -> float:
        if not self.covariates:
            return 0.0
        return float(subject.covariate_vector(self.covariates) @ self.omega)

    def scaled(self, factor: float) -> "SurvivalParams":
        """Copy whose hazard is multiplied by `factor` through the baseline level."""
        shift = np.log(factor)
        if isinstance(self.baseline, SplineBaseline):
            baseline = SplineBaseline(self.baseline.basis, self.baseline.gamma + shift)
        elif isinstance(self.baseline, ConstantBaseline):
            baseline = ConstantBaseline(self.baseline.log_rate + shift)
        elif isinstance(self.baseline, WeibullBaseline):
            baseline = WeibullBaseline(self.baseline.shape, self.baseline.rate * factor)
        elif isinstance(self.baseline, GompertzBaseline):
            baseline = GompertzBaseline(self.baseline.log_scale + shift, self.baseline.growth)
        else:
            raise TypeError(f"cannot scale baseline {type(self.baseline).__name__}")
        return SurvivalParams(self.covariates, self.omega, dict(self.alpha), baseline, self.tau)


@dataclass
class AssociationValue:
    value: np.ndarray
    slope: np.ndarray
    area: np.ndarray

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)


def association_values(subject: Subject, long_params: LongitudinalParams, b, t,
                       bmiz_at: Optional[BmizTrajectory] = None) -> AssociationValue:
    trajectory = bmiz_at or bmiz_trajectory(subject)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return AssociationValue(
        value=eta(subject, long_params, b, t, trajectory),
        slope=eta_slope(subject, long_params, b, t),
        area=eta_integral(subject, long_params, b, np.zeros_like(t), t, trajectory),
    )


def log_hazard(subject: Subject, long_params: LongitudinalParams, surv_params: SurvivalParams, b, t,
               bmiz_at: Optional[BmizTrajectory] = None):
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    value = np.asarray(surv_params.baseline.log_hazard(t_arr), dtype=float) + surv_params.linear_predictor(subject)
    if surv_params.alpha:
        assoc = association_values(subject, long_params, b, t_arr, bmiz_at)
        for name, coef in surv_params.alpha.items():
            value = value + coef * assoc.get(name)
    return float(value[0]) if np.ndim(t) == 0 else value


def hazard(subject: Subject, long_params: LongitudinalParams, surv_params: SurvivalParams, b, t,
           bmiz_at: Optional[BmizTrajectory] = None):
    return np.exp(log_hazard(subject, long_params, surv_params, b, t, bmiz_at))


def quadrature_nodes(t0: float, t1: float, breakpoints: Sequence[float] = (),
                     n_nodes: int = GAUSS_LEGENDRE_NODES, refine: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on [t0, t1], split at breakpoints."""
    if t1 < t0:
        raise RangeError(f"quadrature interval reversed: [{t0}, {t1}]")
    if t1 == t0:
        return np.empty(0), np.empty(0)
    inner = np.asarray(breakpoints, dtype=float)
    inner = inner[(inner > t0) & (inner < t1)]
    edges = np.unique(np.concatenate([[t0], inner, [t1]]))
    if refine > 1:
        edges = np.unique(np.concatenate([np.linspace(a, b, refine + 1) for a, b in zip(edges[:-1], edges[1:])]))
    x_ref, w_ref = leggauss(n_nodes)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x_ref[None, :]).ravel()
    weights = (half[:, None] * w_ref[None, :]).ravel()
    return nodes, weights


def integrate_log_hazard(fn: Callable[[np.ndarray], np.ndarray], t0: float, t1: float,
                         breakpoints: Sequence[float] = (), n_nodes: int = GAUSS_LEGENDRE_NODES,
                         refine: int = 1) -> float:
    """Integral of exp(fn(t)) over [t0, t1]."""
    nodes, weights = quadrature_nodes(t0, t1, breakpoints, n_nodes, refine)
    if nodes.size == 0:
        return 0.0
    values = np.exp(np.asarray(fn(nodes), dtype=float))
    bad = ~np.isfinite(values)
    if np.any(bad):
        raise NumericalError("non-finite hazard in quadrature", location=float(nodes[bad][0]))
    return float(weights @ values)


def hazard_breakpoints(subject: Subject, surv_params: SurvivalParams,
                       bmiz_at: Optional[BmizTrajectory] = None) -> np.ndarray:
    trajectory = bmiz_at or bmiz_trajectory(subject)
    return np.union1d(surv_params.baseline.breakpoints, trajectory.breakpoints)


def cumulative_hazard(subject: Subject, long_params: LongitudinalParams, surv_params: SurvivalParams, b,
                      t0: float, t1: float, bmiz_at: Optional[BmizTrajectory] = None, refine: int = 1) -> float:
    """Lambda(t0, t1) for one subject given b."""
    trajectory = bmiz_at or bmiz_trajectory(subject)
    return integrate_log_hazard(
        lambda s: log_hazard(subject, long_params, surv_params, b, s, trajectory),
        t0, t1, hazard_breakpoints(subject, surv_params, trajectory), refine=refine)


def survival_loglik(subject: Subject, long_params: LongitudinalParams, surv_params: SurvivalParams, b,
                    bmiz_at: Optional[BmizTrajectory] = None) -> float:
    """delta log lambda(T) - Lambda(entry, T)."""
    trajectory = bmiz_at or bmiz_trajectory(subject)
    event = subject.event
    value = -cumulative_hazard(subject, long_params, surv_params, b, event.entry_time, event.observed_time, trajectory)
    if event.event == 1:
        value += log_hazard(subject, long_params, surv_params, b, event.observed_time, trajectory)
    return float(value)
