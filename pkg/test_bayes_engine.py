#!/usr/bin/env python3
"""
Tests for the joint posterior, the Gibbs and Metropolis updates and the chain runner.
"""

import logging
import sys
from pathlib import Path

import numpy as np
from scipy import stats

sys.path.insert(0, str(Path(__file__).parent))

from bayes_engine import (
    AdaptiveProposal, ChainSampler, JointData, JointParams, JointState, PosteriorDraws, _dispersed,
    accept_probability, build_basis, cholesky_log_jacobian, cholesky_params, cov_from_cholesky_params,
    d_log_conditional, gibbs_random_effects_cov, gibbs_sigma2, gibbs_smoothing_precision, initial_state,
    joint_log_posterior, parameter_names, run_mcmc,
)
from config import PriorSpec, SplineConfig
from errors import InitializationError
from fixtures import make_cohort, make_subject, quick_mcmc, require_slow_tests, small_simulation
from hazard_model import SplineBaseline, SurvivalParams, difference_penalty
from longitudinal_model import LongitudinalParams
from mcmc_diagnostics import ess_chains, gelman_rubin
from model_spec import ModelSpec, preset
from simulation import calibrate_baseline_level, default_truth, simulate_cohort

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def _toy_cohort():
    subjects = [
        make_subject("A", times=(0.0, 0.6, 1.3), values=(3.6, 3.8, 3.7), bmiz=(0.1, 0.4, -0.2),
                     observed=1.8, event=1, sex=1, sage=-1.0, ccb=1),
        make_subject("B", times=(0.2, 1.0, 2.1, 2.9), values=(3.9, 3.95, 4.1, 4.0), bmiz=(-0.5, -0.3, 0.2, 0.6),
                     entry=0.2, observed=3.0, sage=0.3, cortico=1),
        make_subject("C", times=(0.0, 0.5), values=(3.5, 3.45), bmiz=(1.2, 0.9),
                     observed=2.4, event=1, sex=1, sage=0.7),
        make_subject("D", times=(0.1, 1.5, 2.2), values=(3.7, 3.8, 3.9), bmiz=(0.0, 0.0, 0.3),
                     entry=0.1, observed=2.6, sage=0.0, immuno=1, acei=1),
    ]
    return make_cohort(subjects)


def _toy_params(spec, basis):
    rng = np.random.default_rng(5)
    long_params = LongitudinalParams(spec.longitudinal_terms, np.array([3.7, 0.06, -0.08, 0.2, 0.04]), 0.2)
    omega = rng.normal(0, 0.3, len(spec.survival_covariates))
    alpha = {a: v for a, v in zip(spec.association, (0.5, 1.2, 0.3))}
    baseline = SplineBaseline(basis, np.linspace(-9.0, -8.0, basis.n_basis))
    surv_params = SurvivalParams(spec.survival_covariates, omega, alpha, baseline, tau=2.0)
    return JointParams(long_params, surv_params, np.array([[0.09, 0.002], [0.002, 0.0025]]))


def test_accept_probability_edge_cases():
    assert accept_probability(0.0) == 1.0
    assert accept_probability(5.0) == 1.0
    assert abs(accept_probability(np.log(0.5)) - 0.5) < 1e-12
    assert accept_probability(-np.inf) == 0.0
    assert accept_probability(np.nan) == 0.0
    assert accept_probability(np.inf) == 1.0


def test_vectorized_posterior_matches_reference_path():
    cohort = _toy_cohort()
    spec = preset("M1")
    basis = build_basis(cohort)
    params = _toy_params(spec, basis)
    b_all = np.random.default_rng(9).normal(0, [0.2, 0.03], (len(cohort), 2))
    prior = PriorSpec()
    data = JointData(cohort, spec, basis)
    state = data.params_to_state(params, b_all)
    fast = data.log_posterior(state, prior)
    reference = joint_log_posterior(cohort, spec, params, b_all, prior)
    assert np.isfinite(fast)
    assert abs(fast - reference) < 1e-6, f"{fast} vs {reference}"


def test_posterior_rejects_invalid_covariance():
    cohort = _toy_cohort()
    spec = preset("M5")
    basis = build_basis(cohort)
    params = _toy_params(spec, basis)
    bad = JointParams(params.long_params, params.surv_params, np.array([[0.1, 0.5], [0.5, 0.1]]))
    assert joint_log_posterior(cohort, spec, bad, np.zeros((len(cohort), 2))) == -np.inf


def test_gibbs_sigma2_concentrates_on_residual_variance():
    rng = np.random.default_rng(1)
    residuals = rng.normal(0, 0.5, 20000)
    draws = [gibbs_sigma2(residuals, PriorSpec(), rng) for _ in range(50)]
    assert abs(np.mean(draws) - 0.25) < 0.02


def test_gibbs_random_effects_cov_tracks_sample_covariance():
    rng = np.random.default_rng(2)
    b = rng.multivariate_normal([0, 0], [[0.09, 0.0], [0.0, 0.0025]], 5000)
    D = gibbs_random_effects_cov(b, PriorSpec(), rng)
    assert np.allclose(D, D.T)
    assert abs(D[0, 0] - 0.09) < 0.015
    assert abs(D[1, 1] - 0.0025) < 0.001


def test_gibbs_smoothing_precision_mean():
    rng = np.random.default_rng(3)
    prior = PriorSpec()
    penalty = difference_penalty(13)
    draws = np.array([gibbs_smoothing_precision(np.zeros(13), penalty, prior, rng) for _ in range(4000)])
    shape = prior.tau_shape + 0.5 * 11
    expected = shape / prior.tau_rate
    assert abs(draws.mean() - expected) < 0.05 * expected


def test_adaptive_proposal_reaches_target_acceptance():
    rng = np.random.default_rng(4)
    proposal = AdaptiveProposal("x", [10.0], target=0.44, window=100, rng=rng)
    x = np.zeros(1)
    for it in range(6000):
        adapting = it < 3000
        candidate = proposal.propose(x)
        accepted = rng.uniform() < accept_probability(-0.5 * (candidate @ candidate - x @ x))
        if accepted:
            x = candidate
        proposal.record(accepted, x, it, adapting)
    assert proposal.proposed == 3000
    assert 0.25 < proposal.acceptance_rate < 0.65


def test_parameter_names_layout():
    spec = preset("M6")
    names = parameter_names(spec, 13)
    assert names[:5] == ["beta.intercept", "beta.time", "beta.sex", "beta.sage", "beta.bmiz"]
    assert names[5:9] == ["sigma2", "D.1.1", "D.1.2", "D.2.2"]
    assert "alpha.value" in names and "alpha.area" in names and "alpha.slope" not in names
    assert names[-1] == "tau"
    assert len(names) == 5 + 4 + 8 + 2 + 13 + 1


def test_non_finite_start_raises_initialization_error():
    cohort = _toy_cohort()
    spec = preset("M5")
    data = JointData(cohort, spec, build_basis(cohort))
    state, sds = initial_state(data, cohort, spec)
    state.D = -np.eye(2)
    sampler = ChainSampler(data, PriorSpec(), quick_mcmc(n_iterations=10, n_chains=1), state,
                           np.random.default_rng(0), 0, sds)
    try:
        sampler.run()
        assert False, "invalid start must be rejected"
    except InitializationError as e:
        assert "prior" in str(e)


def test_run_mcmc_shapes_and_reproducibility():
    sim = small_simulation()
    cohort = sim.complete_cohort
    spec = preset("M5")
    mcmc = quick_mcmc(n_iterations=40, n_chains=2, seed=11)
    first = run_mcmc(cohort, spec, mcmc_config=mcmc)
    second = run_mcmc(cohort, spec, mcmc_config=mcmc)
    assert first.n_draws == 40
    assert first.n_chains == 2
    assert first.b.shape == (40, len(cohort), 2)
    assert first.iteration.min() == 20
    assert np.array_equal(first.values, second.values)
    assert np.all(first.column("sigma2") > 0)
    assert not np.array_equal(first.by_chain("beta.intercept")[0], first.by_chain("beta.intercept")[1])


def test_prior_only_chain_ignores_data():
    sim = small_simulation(n=20, seed=4)
    mcmc = quick_mcmc(n_iterations=30, n_chains=1, use_likelihood=False)
    draws = run_mcmc(sim.complete_cohort, preset("M3"), mcmc_config=mcmc)
    assert draws.n_draws == 15
    assert np.all(np.isfinite(draws.values))


def test_draws_frame_round_trip():
    cohort = _toy_cohort()
    spec = preset("M2")
    basis = build_basis(cohort)
    params = _toy_params(spec, basis)
    b = np.arange(len(cohort) * 2, dtype=float).reshape(len(cohort), 2)
    draws = PosteriorDraws.from_params(spec, basis, params, 6, cohort.subject_ids, b, age_mean=11.0, age_sd=3.5)
    restored = PosteriorDraws.from_frame(draws.to_frame(), draws.metadata())
    assert restored.param_names == draws.param_names
    assert np.array_equal(restored.values, draws.values)
    assert np.array_equal(restored.b, draws.b)
    assert restored.age_mean == 11.0 and restored.age_sd == 3.5
    assert np.allclose(restored.D(0), params.D)
    assert restored.surv_params(3).alpha == {"value": 0.5, "slope": 1.2}
    assert draws.thinned(3).n_draws == 3
    assert draws.thinned(None) is draws


def _assert_moments(draws, mean, var):
    """Sample mean and variance within 3 Monte Carlo standard errors of the analytic values."""
    n = draws.size
    assert abs(draws.mean() - mean) < 3.0 * np.sqrt(var / n), (draws.mean(), mean)
    centred = draws - draws.mean()
    var_se = np.sqrt((np.mean(centred ** 4) - np.var(draws) ** 2) / n)
    assert abs(np.var(draws) - var) < 3.0 * var_se, (np.var(draws), var)


def test_gibbs_sigma2_reproduces_inverse_gamma_moments():
    rng = np.random.default_rng(31)
    prior = PriorSpec()
    residuals = rng.normal(0.0, 0.4, 30)
    shape = prior.sigma2_shape + 15.0
    rate = prior.sigma2_rate + 0.5 * float(residuals @ residuals)
    draws = np.array([gibbs_sigma2(residuals, prior, rng) for _ in range(10000)])
    _assert_moments(draws, rate / (shape - 1), rate ** 2 / ((shape - 1) ** 2 * (shape - 2)))


def test_gibbs_random_effects_cov_reproduces_inverse_wishart_moments():
    rng = np.random.default_rng(32)
    b = rng.multivariate_normal([0.0, 0.0], [[0.09, 0.01], [0.01, 0.0025]], 40)
    nu = 3.0 + 40
    psi = np.eye(2) + b.T @ b
    draws = np.array([gibbs_random_effects_cov(b, PriorSpec(), rng) for _ in range(10000)])
    for i, j in ((0, 0), (0, 1), (1, 1)):
        mean = psi[i, j] / (nu - 3)
        var = ((nu - 1) * psi[i, j] ** 2 + (nu - 3) * psi[i, i] * psi[j, j]) / ((nu - 2) * (nu - 3) ** 2 * (nu - 5))
        _assert_moments(draws[:, i, j], mean, var)


def test_cholesky_parameters_and_jacobian():
    D = np.array([[0.09, 0.004], [0.004, 0.0025]])
    assert np.allclose(cov_from_cholesky_params(cholesky_params(D)), D, atol=1e-12)
    theta = np.array([-1.2, 0.03, -2.5])

    def vech(t):
        cov = cov_from_cholesky_params(t)
        return np.array([cov[0, 0], cov[1, 0], cov[1, 1]])

    eps = 1e-6
    J = np.column_stack([(vech(theta + eps * e) - vech(theta - eps * e)) / (2 * eps) for e in np.eye(3)])
    assert abs(np.log(abs(np.linalg.det(J))) - cholesky_log_jacobian(theta)) < 1e-6


def test_cholesky_conditional_is_the_conjugate_posterior():
    rng = np.random.default_rng(33)
    b = rng.normal(0.0, [0.3, 0.05], (12, 2))
    prior = PriorSpec()
    first = cholesky_params(np.array([[0.1, 0.01], [0.01, 0.004]]))
    second = cholesky_params(np.array([[0.05, -0.002], [-0.002, 0.002]]))

    def conjugate(theta):
        cov = cov_from_cholesky_params(theta)
        return stats.invwishart.logpdf(cov, df=3.0 + 12, scale=np.eye(2) + b.T @ b) + cholesky_log_jacobian(theta)

    difference = d_log_conditional(first, b, prior) - d_log_conditional(second, b, prior)
    assert abs(difference - (conjugate(first) - conjugate(second))) < 1e-8


def test_metropolis_covariance_update_targets_conjugate_posterior():
    rng = np.random.default_rng(34)
    cohort = make_cohort([make_subject(f"S{i:02d}", observed=2.0, event=int(i % 3 == 0)) for i in range(40)])
    spec = preset("M3")
    data = JointData(cohort, spec, build_basis(cohort))
    b = rng.multivariate_normal([0.0, 0.0], [[0.09, 0.01], [0.01, 0.0025]], 40)
    state = JointState(np.zeros(len(spec.longitudinal_terms)), 1.0, 0.1 * np.eye(2), b,
                       np.zeros(len(spec.survival_covariates)), np.zeros(1), np.zeros(data.basis.n_basis), 1.0)
    mcmc = quick_mcmc(n_iterations=10, n_chains=1, use_likelihood=False, d_update="mh")
    sampler = ChainSampler(data, PriorSpec(), mcmc, state, rng)
    kept = []
    for it in range(12000):
        adapting = it < 2000
        sampler.update_D(it, adapting)
        if not adapting:
            kept.append(sampler.state.D.copy())
    kept = np.array(kept)
    expected = (np.eye(2) + b.T @ b) / (3.0 + 40 - 3)
    mean = kept.mean(axis=0)
    assert abs(mean[0, 0] / expected[0, 0] - 1.0) < 0.05
    assert abs(mean[1, 1] / expected[1, 1] - 1.0) < 0.05
    assert abs(mean[0, 1] - expected[0, 1]) < 0.05 * np.sqrt(expected[0, 0] * expected[1, 1])
    assert np.all(sampler.state.b == b)
    assert 0.1 < sampler.acceptance()["D"] < 0.6


def test_metropolis_covariance_chain_runs_end_to_end():
    sim = small_simulation(n=20, seed=4)
    draws = run_mcmc(sim.complete_cohort, preset("M5"),
                     mcmc_config=quick_mcmc(n_iterations=30, n_chains=1, d_update="mh"))
    assert "D" in draws.acceptance["chain0"]
    for k in range(draws.n_draws):
        np.linalg.cholesky(draws.D(k))


def test_penalty_order_sets_joint_data_penalty():
    cohort = _toy_cohort()
    spec = preset("M5")
    basis = build_basis(cohort)
    second = JointData(cohort, spec, basis)
    first = JointData(cohort, spec, basis, penalty_order=1)
    assert np.array_equal(second.penalty, difference_penalty(basis.n_basis, 2))
    assert np.array_equal(first.penalty, difference_penalty(basis.n_basis, 1))
    assert first.penalty_rank == basis.n_basis - 1
    assert second.penalty_rank == basis.n_basis - 2
    state = second.params_to_state(_toy_params(spec, basis), np.zeros((len(cohort), 2)))
    assert first.log_posterior(state, PriorSpec()) != second.log_posterior(state, PriorSpec())


def test_run_mcmc_keeps_configured_penalty_order():
    sim = small_simulation(n=20, seed=4)
    draws = run_mcmc(sim.complete_cohort, preset("M3"), mcmc_config=quick_mcmc(n_iterations=10, n_chains=1),
                     spline_config=SplineConfig(penalty_order=1))
    assert draws.penalty_order == 1
    assert PosteriorDraws.from_frame(draws.to_frame(), draws.metadata()).penalty_order == 1


def test_dispersed_starts_move_every_population_block():
    cohort = _toy_cohort()
    spec = preset("M1")
    data = JointData(cohort, spec, build_basis(cohort))
    state, sds = initial_state(data, cohort, spec)
    rng = np.random.default_rng(12)
    same = _dispersed(state, sds, rng, 0)
    assert np.array_equal(same.beta, state.beta) and same.sigma2 == state.sigma2
    assert np.array_equal(same.D, state.D) and np.array_equal(same.gamma, state.gamma)
    moved = _dispersed(state, sds, rng, 1)
    for name in ("beta", "omega", "alpha", "gamma"):
        assert not np.allclose(getattr(moved, name), getattr(state, name)), name
    assert moved.sigma2 > 0 and moved.sigma2 != state.sigma2
    assert not np.allclose(moved.D, state.D)
    assert np.allclose(moved.D, moved.D.T)
    np.linalg.cholesky(moved.D)
    assert np.array_equal(moved.b, state.b) and moved.tau == state.tau
    sampler = ChainSampler(data, PriorSpec(), quick_mcmc(n_iterations=4, n_chains=1), moved, rng, 1, sds)
    assert sampler.run()["values"].shape[0] == 2


def test_prior_only_sampler_recovers_prior_moments():
    require_slow_tests()
    sim = small_simulation(n=20, seed=6)
    spec = ModelSpec(name="prior", survival_covariates=("ccb",), association=("value",))
    prior = PriorSpec()
    mcmc = quick_mcmc(n_iterations=20000, n_chains=2, seed=13, use_likelihood=False)
    draws = run_mcmc(sim.complete_cohort, spec, prior, mcmc)
    checks = [(f"beta.{t}", prior.beta_sd) for t in spec.longitudinal_terms]
    checks += [("omega.ccb", prior.omega_sd), ("alpha.value", prior.alpha_sd)]
    for name, sd in checks:
        chains = draws.by_chain(name)
        samples = chains.ravel()
        ess = ess_chains(chains)
        ess_square = ess_chains((chains - samples.mean()) ** 2)
        assert abs(samples.mean()) < 3.0 * sd / np.sqrt(ess), (name, samples.mean(), ess)
        assert abs(samples.std() - sd) < 3.0 * sd / np.sqrt(2.0 * ess_square), (name, samples.std(), ess_square)


def test_parameter_recovery_on_simulated_cohort():
    require_slow_tests()
    truth = calibrate_baseline_level(default_truth(("area",)), 514, 2019, 0.11)
    sim = simulate_cohort(truth, 514, 2019)
    mcmc = quick_mcmc(n_iterations=20000, n_chains=4, seed=2019, thin=10, threads=4)
    draws = run_mcmc(sim.complete_cohort, preset("M5"), mcmc_config=mcmc)

    targets = {f"beta.{t}": float(v) for t, v in zip(truth.long_params.terms, truth.long_params.beta)}
    targets.update({f"omega.{c}": float(v) for c, v in zip(truth.surv_params.covariates, truth.surv_params.omega)})
    targets["alpha.area"] = truth.surv_params.alpha["area"]
    targets["sigma2"] = truth.long_params.sigma ** 2
    assert len(targets) == 15

    rhat = gelman_rubin(draws)
    assert max(rhat[name] for name in targets) < 1.05, {n: rhat[n] for n in targets}
    covered = 0
    for name, value in targets.items():
        lo, hi = np.quantile(draws.column(name), [0.025, 0.975])
        covered += int(lo <= value <= hi)
    assert covered >= 12, covered
    assert np.mean(draws.column("alpha.area") > 0) > 0.99


if __name__ == "__main__":
    from run_tests import run_module
    sys.exit(run_module(sys.modules[__name__]))
