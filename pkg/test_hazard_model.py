#!/usr/bin/env python3
"""
Tests for the baseline hazards, B-spline basis and cumulative hazard quadrature.
"""

import logging
import sys
from pathlib import Path

import numpy as np
from scipy import integrate

sys.path.insert(0, str(Path(__file__).parent))

from errors import RangeError
from fixtures import make_subject
from hazard_model import (
    ConstantBaseline, GompertzBaseline, SplineBaseline, SplineBasis, SurvivalParams, WeibullBaseline,
    bspline_basis, cumulative_hazard, difference_penalty, hazard, log_baseline_hazard, log_hazard, quadrature_nodes,
    survival_loglik,
)
from longitudinal_model import LongitudinalParams

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

LONG = LongitudinalParams.from_mapping({"intercept": 0.5, "time": 0.1, "bmiz": 0.2}, sigma=0.2)


def _surv(baseline, alpha=None, covariates=(), omega=()):
    return SurvivalParams(tuple(covariates), np.asarray(omega, dtype=float), dict(alpha or {}), baseline)


def test_basis_is_partition_of_unity():
    basis = SplineBasis.from_event_times(np.linspace(0.1, 5.9, 40), upper=6.0)
    assert basis.n_basis == 13
    values = bspline_basis(np.linspace(0.0, 6.0, 61), basis)
    assert np.allclose(values.sum(axis=1), 1.0)
    assert np.all(values >= 0)


def test_basis_outside_support_is_range_error():
    basis = SplineBasis.from_event_times([1.0, 2.0], upper=3.0, n_interior=2)
    try:
        bspline_basis(3.5, basis)
        assert False, "evaluation beyond the boundary knot must fail"
    except RangeError as e:
        assert e.location == 3.5


def test_sparse_events_fall_back_to_even_knots():
    basis = SplineBasis.from_event_times([1.0], upper=4.0, n_interior=3)
    assert np.allclose(basis.interior_knots, [1.0, 2.0, 3.0])


def test_log_baseline_matches_spline_baseline():
    basis = SplineBasis.from_event_times(np.linspace(0.1, 5.9, 40), upper=6.0)
    gamma = np.linspace(-4.0, -2.0, basis.n_basis)
    grid = np.linspace(0.0, 6.0, 13)
    assert np.allclose(log_baseline_hazard(grid, gamma, basis), SplineBaseline(basis, gamma).log_hazard(grid))


def test_hazard_combines_covariates_and_current_value():
    subject = make_subject(ccb=1)
    surv = _surv(ConstantBaseline(np.log(0.3)), {"value": 0.5}, ("ccb",), (0.7,))
    b = np.array([0.1, 0.0])
    expected = np.log(0.3) + 0.7 + 0.5 * (0.5 + 0.1 * 1.0 + 0.1)
    assert abs(log_hazard(subject, LONG, surv, b, 1.0) - expected) < 1e-12
    assert abs(hazard(subject, LONG, surv, b, 1.0) - np.exp(expected)) < 1e-12


def test_difference_penalty_annihilates_linear_coefficients():
    K = difference_penalty(8, order=2)
    assert np.allclose(K @ np.arange(8.0), 0.0)
    assert np.allclose(K @ np.ones(8), 0.0)


def test_constant_gamma_gives_constant_hazard():
    basis = SplineBasis.from_event_times(np.linspace(0.2, 4.8, 30), upper=5.0)
    baseline = SplineBaseline(basis, np.full(basis.n_basis, np.log(0.3)))
    subject = make_subject(entry=0.5, observed=4.0)
    value = cumulative_hazard(subject, LONG, _surv(baseline), np.zeros(2), 0.5, 4.0)
    assert abs(value - 0.3 * 3.5) < 1e-10


def test_weibull_and_gompertz_cumulative():
    subject = make_subject()
    weibull = WeibullBaseline(shape=2.0, rate=1.0)
    assert abs(cumulative_hazard(subject, LONG, _surv(weibull), np.zeros(2), 0.0, 2.0) - 4.0) < 1e-10
    gompertz = GompertzBaseline(log_scale=np.log(0.1), growth=0.5)
    expected = 0.1 * (np.exp(1.5) - np.exp(0.5)) / 0.5
    assert abs(cumulative_hazard(subject, LONG, _surv(gompertz), np.zeros(2), 1.0, 3.0) - expected) < 1e-10


def test_area_association_against_adaptive_quadrature():
    subject = make_subject(times=(0.0, 0.8, 1.9), bmiz=(0.3, -0.6, 1.2), entry=0.2, observed=3.0)
    surv = _surv(ConstantBaseline(np.log(0.05)), alpha={"area": 0.7, "value": 0.4},
                 covariates=("ccb",), omega=(0.3,))
    b = np.array([0.1, -0.05])
    numeric, _ = integrate.quad(lambda s: np.exp(log_hazard(subject, LONG, surv, b, s)), 0.2, 3.0,
                                points=[0.8, 1.9], epsabs=1e-13, epsrel=1e-12)
    assert abs(cumulative_hazard(subject, LONG, surv, b, 0.2, 3.0) - numeric) < 1e-9


def test_quadrature_splits_at_breakpoints():
    nodes, weights = quadrature_nodes(0.0, 2.0, breakpoints=[0.5, 1.0, 5.0], n_nodes=3)
    assert nodes.size == 9
    assert abs(weights.sum() - 2.0) < 1e-12
    empty_nodes, _ = quadrature_nodes(1.0, 1.0)
    assert empty_nodes.size == 0


def test_survival_loglik_for_event_and_censoring():
    surv = _surv(ConstantBaseline(np.log(0.2)))
    event = make_subject(entry=1.0, observed=3.0, event=1)
    censored = make_subject(entry=1.0, observed=3.0, event=0)
    assert abs(survival_loglik(event, LONG, surv, np.zeros(2)) - (np.log(0.2) - 0.4)) < 1e-10
    assert abs(survival_loglik(censored, LONG, surv, np.zeros(2)) + 0.4) < 1e-10


def test_scaled_multiplies_hazard():
    basis = SplineBasis.from_event_times(np.linspace(0.2, 4.8, 30), upper=5.0)
    surv = _surv(SplineBaseline(basis, np.linspace(-2, -1, basis.n_basis)))
    subject = make_subject()
    base = cumulative_hazard(subject, LONG, surv, np.zeros(2), 0.0, 4.0)
    doubled = cumulative_hazard(subject, LONG, surv.scaled(2.0), np.zeros(2), 0.0, 4.0)
    assert abs(doubled - 2.0 * base) < 1e-10


if __name__ == "__main__":
    from run_tests import run_module
    sys.exit(run_module(sys.modules[__name__]))
