"""
Joint posterior of the longitudinal and survival sub-models and its
Metropolis-within-Gibbs sampler.

Conjugate Gibbs steps update the residual variance, the random-effect
covariance and the spline smoothing precision; the covariance can instead
move by random-walk Metropolis on its log-diagonal Cholesky factor. Adaptive
random-walk Metropolis blocks update the fixed effects, the survival
coefficients (covariates plus associations), the spline coefficients and each
subject's random effects.
Chains run concurrently on a thread pool with independent RNG streams.
"""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from cohort_data import Cohort
from config import McmcConfig, PriorSpec, SplineConfig
from errors import InitializationError, ModelFitError, NumericalError
from hazard_model import (
    SplineBaseline, SplineBasis, SurvivalParams, bspline_basis, difference_penalty,
    quadrature_nodes, survival_loglik,
)
from longitudinal_model import (
    LongitudinalParams, bmiz_trajectory, design_area, design_slope, design_value,
    fit_longitudinal_lmm, longitudinal_loglik, require_bmiz, stack_design,
)
from model_spec import ModelSpec
from performance_profiler import ComponentProfiler, profile_mcmc

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class JointParams:
    """Population parameters of one joint model (reference evaluation path)."""
    long_params: LongitudinalParams
    surv_params: SurvivalParams
    D: np.ndarray


@dataclass
class JointState:
    beta: np.ndarray
    sigma2: float
    D: np.ndarray
    b: np.ndarray  # (n_subjects, 2)
    omega: np.ndarray
    alpha: np.ndarray  # active associations in ModelSpec order
    gamma: np.ndarray
    tau: float

    def copy(self) -> "JointState":
        return JointState(self.beta.copy(), self.sigma2, self.D.copy(), self.b.copy(), self.omega.copy(),
                          self.alpha.copy(), self.gamma.copy(), self.tau)


def build_basis(cohort: Cohort, spline: Optional[SplineConfig] = None) -> SplineBasis:
    spline = spline or SplineConfig()
    times = cohort.observed_times
    return SplineBasis.from_event_times(times[cohort.event_flags == 1], float(times.max()),
                                        spline.n_interior_knots, spline.degree)


def accept_probability(log_ratio: float) -> float:
    """Metropolis acceptance min(1, exp(log_ratio)); NaN counts as rejection."""
    if not np.isfinite(log_ratio):
        return 1.0 if log_ratio == np.inf else 0.0
    return float(np.exp(min(0.0, log_ratio)))


def _is_pd(matrix: np.ndarray) -> bool:
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(matrix)
        return True
    except np.linalg.LinAlgError:
        return False


def _d_prior(prior: PriorSpec) -> Tuple[float, np.ndarray]:
    df = prior.D_df if prior.D_df is not None else 3.0
    scale = np.asarray(prior.D_scale, dtype=float) if prior.D_scale is not None else np.eye(2)
    return df, scale


def log_prior(beta, sigma2, D, omega, alpha, gamma, tau, prior: PriorSpec,
              penalty: Optional[np.ndarray] = None, penalty_rank: Optional[int] = None) -> float:
    """Sum of log prior densities; -inf outside the parameter space."""
    if not sigma2 > 0 or not _is_pd(D) or (tau is not None and not tau > 0):
        return -np.inf
    df, scale = _d_prior(prior)
    value = float(np.sum(stats.norm.logpdf(beta, 0.0, prior.beta_sd)))
    value += float(np.sum(stats.norm.logpdf(omega, 0.0, prior.omega_sd)))
    value += float(np.sum(stats.norm.logpdf(alpha, 0.0, prior.alpha_sd)))
    value += float(stats.invgamma.logpdf(sigma2, prior.sigma2_shape, scale=prior.sigma2_rate))
    value += float(stats.invwishart.logpdf(D, df=df, scale=scale))
    if gamma is not None and tau is not None and penalty is not None:
        value += smoothing_log_prior(gamma, tau, penalty, prior, penalty_rank)
        value += float(stats.gamma.logpdf(tau, prior.tau_shape, scale=1.0 / prior.tau_rate))
    return value


def smoothing_log_prior(gamma: np.ndarray, tau: float, penalty: np.ndarray, prior: PriorSpec,
                        rank: Optional[int] = None) -> float:
    """Random-walk prior with precision tau plus a weak Gaussian ridge."""
    rank = np.linalg.matrix_rank(penalty) if rank is None else rank
    quad = float(gamma @ penalty @ gamma)
    value = 0.5 * rank * (np.log(tau) - LOG_2PI) - 0.5 * tau * quad
    return value + float(np.sum(stats.norm.logpdf(gamma, 0.0, prior.gamma_sd)))


def joint_log_posterior(cohort: Cohort, model_spec: ModelSpec, params: JointParams, b_all,
                        prior: Optional[PriorSpec] = None, penalty_order: int = 2) -> float:
    """Unnormalized log posterior, evaluated subject by subject."""
    prior = prior or PriorSpec()
    long_params, surv_params, D = params.long_params, params.surv_params, params.D
    if not long_params.sigma > 0 or not _is_pd(D):
        return -np.inf
    b_all = np.asarray(b_all, dtype=float).reshape(len(cohort), 2)
    gamma = tau = penalty = None
    if isinstance(surv_params.baseline, SplineBaseline) and surv_params.tau is not None:
        gamma, tau = surv_params.baseline.gamma, surv_params.tau
        penalty = difference_penalty(len(gamma), penalty_order)
    alpha = np.array([surv_params.alpha[a] for a in model_spec.association if a in surv_params.alpha])
    total = log_prior(long_params.beta, long_params.sigma ** 2, D, surv_params.omega, alpha, gamma, tau,
                      prior, penalty)
    if not np.isfinite(total):
        return -np.inf
    for subject, b in zip(cohort, b_all):
        trajectory = bmiz_trajectory(subject)
        try:
            total += longitudinal_loglik(subject, long_params, b)
            total += survival_loglik(subject, long_params, surv_params, b, trajectory)
        except NumericalError:
            return -np.inf
        total += float(stats.multivariate_normal.logpdf(b, mean=np.zeros(2), cov=D))
    return float(total) if np.isfinite(total) else -np.inf


class JointData:
    """Cohort designs stacked for vectorized likelihood evaluation.

    Longitudinal rows are stacked across subjects; quadrature nodes on
    [entry_i, T_i] are stacked likewise, with `node_subject` mapping each node
    back to its subject for per-subject sums.
    """

    def __init__(self, cohort: Cohort, spec: ModelSpec, basis: SplineBasis, refine: int = 1,
                 penalty_order: int = 2):
        require_bmiz(cohort, spec)
        self.spec = spec
        self.basis = basis
        self.subject_ids = cohort.subject_ids
        self.n = len(cohort)
        self.terms = spec.longitudinal_terms
        self.covariates = spec.survival_covariates
        self.associations = spec.association
        self.penalty_order = penalty_order
        self.penalty = difference_penalty(basis.n_basis, penalty_order)
        self.penalty_rank = int(np.linalg.matrix_rank(self.penalty))

        self.y, self.X, self.Z, _ = stack_design(cohort, self.terms)
        self.obs_subject = np.repeat(np.arange(self.n), [s.n_records for s in cohort])
        self.ZtZ = np.zeros((self.n, 2, 2))
        np.add.at(self.ZtZ, self.obs_subject, self.Z[:, :, None] * self.Z[:, None, :])

        self.W = np.array([s.covariate_vector(self.covariates) for s in cohort]).reshape(self.n, len(self.covariates))
        self.delta = cohort.event_flags.astype(float)
        self.T = cohort.observed_times
        self.entry = cohort.entry_times
        self.B_T = bspline_basis(self.T, basis)

        bmiz_breaks = spec.uses_bmiz and (spec.is_active("value") or spec.is_active("area"))
        node_parts, weight_parts, owner_parts = [], [], []
        node_X = {a: [] for a in self.associations}
        node_Z = {a: [] for a in self.associations}
        event_X = {a: [] for a in self.associations}
        event_Z = {a: [] for a in self.associations}
        for i, subject in enumerate(cohort):
            trajectory = bmiz_trajectory(subject)
            breaks = basis.interior_knots
            if bmiz_breaks:
                breaks = np.union1d(breaks, trajectory.breakpoints)
            nodes, weights = quadrature_nodes(subject.event.entry_time, subject.event.observed_time, breaks,
                                              refine=refine)
            node_parts.append(nodes)
            weight_parts.append(weights)
            owner_parts.append(np.full(nodes.size, i))
            for a in self.associations:
                for target_X, target_Z, times in ((node_X, node_Z, nodes),
                                                  (event_X, event_Z, np.array([subject.event.observed_time]))):
                    X_a, Z_a = self._association_design(a, subject, times, trajectory)
                    target_X[a].append(X_a)
                    target_Z[a].append(Z_a)
        self.nodes = np.concatenate(node_parts)
        self.node_weights = np.concatenate(weight_parts)
        self.node_subject = np.concatenate(owner_parts).astype(int)
        self.B_nodes = bspline_basis(self.nodes, basis) if self.nodes.size else np.zeros((0, basis.n_basis))
        p = len(self.terms)
        self.node_X = {a: np.vstack(node_X[a]) if self.nodes.size else np.zeros((0, p)) for a in self.associations}
        self.node_Z = {a: np.vstack(node_Z[a]) if self.nodes.size else np.zeros((0, 2)) for a in self.associations}
        self.event_X = {a: np.vstack(event_X[a]) for a in self.associations}
        self.event_Z = {a: np.vstack(event_Z[a]) for a in self.associations}
        logger.info(f"Joint data: {self.n} subjects, {self.y.size} measurements, {self.nodes.size} quadrature nodes, "
                    f"associations={list(self.associations)}")

    def _association_design(self, name, subject, times, trajectory):
        if times.size == 0:
            return np.zeros((0, len(self.terms))), np.zeros((0, 2))
        if name == "value":
            return design_value(subject, times, self.terms, trajectory)
        if name == "slope":
            return design_slope(subject, times, self.terms)
        return design_area(subject, times, self.terms, trajectory)

    @property
    def n_obs(self) -> int:
        return int(self.y.size)

    def association_fixed(self, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not self.associations:
            return np.zeros((self.nodes.size, 0)), np.zeros((self.n, 0))
        node = np.column_stack([self.node_X[a] @ beta for a in self.associations])
        event = np.column_stack([self.event_X[a] @ beta for a in self.associations])
        return node, event

    def association_random(self, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not self.associations:
            return np.zeros((self.nodes.size, 0)), np.zeros((self.n, 0))
        b_nodes = b[self.node_subject]
        node = np.column_stack([np.einsum("mk,mk->m", self.node_Z[a], b_nodes) for a in self.associations])
        event = np.column_stack([np.einsum("nk,nk->n", self.event_Z[a], b) for a in self.associations])
        return node, event

    def random_part(self, b: np.ndarray) -> np.ndarray:
        return np.einsum("nk,nk->n", self.Z, b[self.obs_subject])

    def long_loglik(self, xb: np.ndarray, zb: np.ndarray, sigma2: float) -> np.ndarray:
        resid = self.y - xb - zb
        terms = -0.5 * (LOG_2PI + np.log(sigma2)) - 0.5 * resid * resid / sigma2
        return np.bincount(self.obs_subject, weights=terms, minlength=self.n)

    def surv_loglik(self, gamma: np.ndarray, lin_cov: np.ndarray, alpha: np.ndarray,
                    node_assoc: np.ndarray, event_assoc: np.ndarray) -> np.ndarray:
        log_h_nodes = self.B_nodes @ gamma + lin_cov[self.node_subject] + node_assoc @ alpha
        log_h_event = self.B_T @ gamma + lin_cov + event_assoc @ alpha
        with np.errstate(over="ignore", invalid="ignore"):
            cumulative = np.bincount(self.node_subject, weights=self.node_weights * np.exp(log_h_nodes),
                                     minlength=self.n)
        value = np.where(self.delta == 1, log_h_event, 0.0) - cumulative
        return np.where(np.isnan(value), -np.inf, value)

    @staticmethod
    def re_logdensity(b: np.ndarray, D: np.ndarray) -> np.ndarray:
        D_inv = np.linalg.inv(D)
        _, logdet = np.linalg.slogdet(D)
        quad = np.einsum("ni,ij,nj->n", b, D_inv, b)
        return -LOG_2PI - 0.5 * logdet - 0.5 * quad

    def subject_loglik(self, state: JointState) -> np.ndarray:
        """Per-subject log p(y_i, T_i, delta_i | theta, b_i)."""
        xb = self.X @ state.beta
        zb = self.random_part(state.b)
        node_f, event_f = self.association_fixed(state.beta)
        node_r, event_r = self.association_random(state.b)
        long = self.long_loglik(xb, zb, state.sigma2)
        surv = self.surv_loglik(state.gamma, self.W @ state.omega, state.alpha, node_f + node_r, event_f + event_r)
        return long + surv

    def log_posterior(self, state: JointState, prior: PriorSpec, use_likelihood: bool = True) -> float:
        lp = log_prior(state.beta, state.sigma2, state.D, state.omega, state.alpha, state.gamma, state.tau,
                       prior, self.penalty, self.penalty_rank)
        if not np.isfinite(lp):
            return -np.inf
        total = lp + float(np.sum(self.re_logdensity(state.b, state.D)))
        if use_likelihood:
            total += float(np.sum(self.subject_loglik(state)))
        return float(total) if np.isfinite(total) else -np.inf

    def params_to_state(self, params: JointParams, b_all) -> JointState:
        baseline = params.surv_params.baseline
        if not isinstance(baseline, SplineBaseline):
            raise ModelFitError("the sampler needs a spline baseline", term="baseline")
        return JointState(
            beta=np.array([params.long_params.coef(t) for t in self.terms]),
            sigma2=params.long_params.sigma ** 2,
            D=np.asarray(params.D, dtype=float),
            b=np.asarray(b_all, dtype=float).reshape(self.n, 2),
            omega=np.asarray(params.surv_params.omega, dtype=float),
            alpha=np.array([params.surv_params.alpha.get(a, 0.0) for a in self.associations]),
            gamma=np.asarray(baseline.gamma, dtype=float),
            tau=params.surv_params.tau if params.surv_params.tau is not None else 1.0,
        )


def gibbs_sigma2(residuals: np.ndarray, prior: PriorSpec, rng: np.random.Generator) -> float:
    """Draw sigma^2 | residuals from its inverse-gamma full conditional."""
    residuals = np.asarray(residuals, dtype=float)
    shape = prior.sigma2_shape + 0.5 * residuals.size
    rate = prior.sigma2_rate + 0.5 * float(residuals @ residuals)
    precision = max(float(rng.gamma(shape, 1.0 / rate)), np.finfo(float).tiny)
    return 1.0 / precision


def gibbs_random_effects_cov(b: np.ndarray, prior: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw D | b from its inverse-Wishart full conditional."""
    b = np.asarray(b, dtype=float)
    df, scale = _d_prior(prior)
    draw = stats.invwishart.rvs(df=df + b.shape[0], scale=scale + b.T @ b, random_state=rng)
    draw = np.atleast_2d(draw)
    return 0.5 * (draw + draw.T)


def cholesky_params(D: np.ndarray) -> np.ndarray:
    """(log L11, L21, log L22) of the lower Cholesky factor of a 2x2 covariance."""
    L = np.linalg.cholesky(D)
    return np.array([np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])])


def cov_from_cholesky_params(theta: np.ndarray) -> np.ndarray:
    L = np.array([[np.exp(theta[0]), 0.0], [theta[1], np.exp(theta[2])]])
    return L @ L.T


def cholesky_log_jacobian(theta: np.ndarray) -> float:
    """log |dD / dtheta| for the map theta -> L L'."""
    return float(np.log(4.0) + 3.0 * theta[0] + 2.0 * theta[2])


def d_log_conditional(theta: np.ndarray, b: np.ndarray, prior: PriorSpec) -> float:
    """Log full conditional of D given b, as a density over the Cholesky parameters."""
    D = cov_from_cholesky_params(theta)
    df, scale = _d_prior(prior)
    value = float(stats.invwishart.logpdf(D, df=df, scale=scale))
    value += float(np.sum(JointData.re_logdensity(b, D)))
    return value + cholesky_log_jacobian(theta)


def gibbs_smoothing_precision(gamma: np.ndarray, penalty: np.ndarray, prior: PriorSpec,
                              rng: np.random.Generator, rank: Optional[int] = None) -> float:
    """Draw tau | gamma from its gamma full conditional."""
    rank = np.linalg.matrix_rank(penalty) if rank is None else rank
    shape = prior.tau_shape + 0.5 * rank
    rate = prior.tau_rate + 0.5 * float(gamma @ penalty @ gamma)
    return float(rng.gamma(shape, 1.0 / rate))


class AdaptiveProposal:
    """Random-walk proposal with Robbins-Monro scale and empirical covariance.

    Adaptation happens only while `adapting` is true (burn-in); afterwards the
    proposal is fixed.
    """

    def __init__(self, name: str, initial_sd: Sequence[float], target: float, window: int,
                 rng: np.random.Generator):
        self.name = name
        self.dim = len(initial_sd)
        self.chol = np.diag(np.asarray(initial_sd, dtype=float) * 2.38 / np.sqrt(max(self.dim, 1)))
        self.log_scale = 0.0
        self.target = target
        self.window = window
        self.rng = rng
        self._n = 0
        self._mean = np.zeros(self.dim)
        self._m2 = np.zeros((self.dim, self.dim))
        self.proposed = self.accepted = 0
        self.burn_proposed = self.burn_accepted = 0

    def propose(self, x: np.ndarray) -> np.ndarray:
        return x + np.exp(self.log_scale) * (self.chol @ self.rng.standard_normal(self.dim))

    def record(self, accepted: bool, x: np.ndarray, iteration: int, adapting: bool):
        if not adapting:
            self.proposed += 1
            self.accepted += int(accepted)
            return
        self.burn_proposed += 1
        self.burn_accepted += int(accepted)
        self.log_scale += (float(accepted) - self.target) / (iteration + 1) ** 0.6
        self._n += 1
        delta = x - self._mean
        self._mean += delta / self._n
        self._m2 += np.outer(delta, x - self._mean)
        if (iteration + 1) % self.window == 0 and self._n > 2 * self.dim:
            cov = self._m2 / (self._n - 1)
            try:
                self.chol = np.linalg.cholesky(cov * 2.38 ** 2 / self.dim + 1e-10 * np.eye(self.dim))
            except np.linalg.LinAlgError:
                logger.debug(f"{self.name}: empirical covariance not positive definite; keeping proposal")

    @property
    def acceptance_rate(self) -> float:
        if self.proposed:
            return self.accepted / self.proposed
        return self.burn_accepted / self.burn_proposed if self.burn_proposed else float("nan")


def parameter_names(spec: ModelSpec, n_basis: int) -> List[str]:
    names = [f"beta.{t}" for t in spec.longitudinal_terms]
    names += ["sigma2", "D.1.1", "D.1.2", "D.2.2"]
    names += [f"omega.{c}" for c in spec.survival_covariates]
    names += [f"alpha.{a}" for a in spec.association]
    names += [f"gamma.{q + 1}" for q in range(n_basis)]
    names.append("tau")
    return names


def flatten_state(state: JointState) -> np.ndarray:
    return np.concatenate([
        state.beta, [state.sigma2, state.D[0, 0], state.D[0, 1], state.D[1, 1]],
        state.omega, state.alpha, state.gamma, [state.tau],
    ])


class ChainSampler:
    """One Metropolis-within-Gibbs chain over a JointData design."""

    def __init__(self, data: JointData, prior: PriorSpec, mcmc: McmcConfig, init: JointState,
                 rng: np.random.Generator, chain_id: int = 0, initial_sd: Optional[Dict[str, np.ndarray]] = None):
        self.data = data
        self.prior = prior
        self.mcmc = mcmc
        self.rng = rng
        self.chain_id = chain_id
        self.lik = mcmc.use_likelihood
        self.state = init.copy()
        initial_sd = initial_sd or {}
        p, c, A = len(data.terms), len(data.covariates), len(data.associations)
        block, scalar = mcmc.target_accept_block, mcmc.target_accept_scalar
        self.beta_proposal = AdaptiveProposal(
            "beta", initial_sd.get("beta", np.full(p, 0.05)), block if p > 1 else scalar, mcmc.adaptation_window, rng)
        self.surv_proposal = AdaptiveProposal(
            "omega_alpha", initial_sd.get("omega_alpha", np.full(c + A, 0.1)), block if c + A > 1 else scalar,
            mcmc.adaptation_window, rng) if c + A else None
        self.gamma_proposal = AdaptiveProposal(
            "gamma", initial_sd.get("gamma", np.full(data.basis.n_basis, 0.1)), block, mcmc.adaptation_window, rng)
        self.d_proposal = AdaptiveProposal(
            "D", initial_sd.get("D", np.full(3, 0.1)), block, mcmc.adaptation_window, rng) if mcmc.d_update == "mh" else None
        self.b_log_scale = np.zeros(data.n)
        self.b_accepted = np.zeros(data.n)
        self.b_proposed = 0
        self._refresh()

    def _refresh(self):
        s, d = self.state, self.data
        self.xb = d.X @ s.beta
        self.zb = d.random_part(s.b)
        self.node_fixed, self.event_fixed = d.association_fixed(s.beta)
        self.node_random, self.event_random = d.association_random(s.b)
        self.lin_cov = d.W @ s.omega
        self.re = d.re_logdensity(s.b, s.D)
        if self.lik:
            self.long = d.long_loglik(self.xb, self.zb, s.sigma2)
            self.surv = self._surv(s.gamma, self.lin_cov, s.alpha, self.node_fixed + self.node_random,
                                   self.event_fixed + self.event_random)
        else:
            self.long = np.zeros(d.n)
            self.surv = np.zeros(d.n)

    def _surv(self, gamma, lin_cov, alpha, node_assoc, event_assoc):
        return self.data.surv_loglik(gamma, lin_cov, alpha, node_assoc, event_assoc)

    def _accept(self, log_ratio: float) -> bool:
        return self.rng.uniform() < accept_probability(log_ratio)

    def log_posterior(self) -> float:
        s = self.state
        lp = log_prior(s.beta, s.sigma2, s.D, s.omega, s.alpha, s.gamma, s.tau, self.prior, self.data.penalty,
                       self.data.penalty_rank)
        return float(lp + self.re.sum() + self.long.sum() + self.surv.sum())

    def update_beta(self, iteration: int, adapting: bool):
        s, d, prior = self.state, self.data, self.prior
        proposal = self.beta_proposal.propose(s.beta)
        log_ratio = float(np.sum(stats.norm.logpdf(proposal, 0.0, prior.beta_sd)
                                 - stats.norm.logpdf(s.beta, 0.0, prior.beta_sd)))
        if self.lik:
            xb = d.X @ proposal
            long = d.long_loglik(xb, self.zb, s.sigma2)
            node_fixed, event_fixed = d.association_fixed(proposal)
            if d.associations:
                surv = self._surv(s.gamma, self.lin_cov, s.alpha, node_fixed + self.node_random,
                                  event_fixed + self.event_random)
            else:
                surv = self.surv
            log_ratio += float(long.sum() - self.long.sum() + surv.sum() - self.surv.sum())
        accepted = self._accept(log_ratio)
        if accepted:
            s.beta = proposal
            if self.lik:
                self.xb, self.long, self.surv = xb, long, surv
                self.node_fixed, self.event_fixed = node_fixed, event_fixed
            else:
                self.xb = d.X @ proposal
                self.node_fixed, self.event_fixed = d.association_fixed(proposal)
        self.beta_proposal.record(accepted, s.beta, iteration, adapting)

    def update_random_effects(self, iteration: int, adapting: bool):
        s, d = self.state, self.data
        D_inv = np.linalg.inv(s.D)
        if self.lik:
            precision = d.ZtZ / s.sigma2 + D_inv[None, :, :]
            chol = np.linalg.cholesky(np.linalg.inv(precision))
        else:
            chol = np.broadcast_to(np.linalg.cholesky(s.D), (d.n, 2, 2))
        step = np.einsum("nij,nj->ni", chol, self.rng.standard_normal((d.n, 2)))
        proposal = s.b + np.exp(self.b_log_scale)[:, None] * step
        re = d.re_logdensity(proposal, s.D)
        log_ratio = re - self.re
        if self.lik:
            zb = d.random_part(proposal)
            long = d.long_loglik(self.xb, zb, s.sigma2)
            node_random, event_random = d.association_random(proposal)
            if d.associations:
                surv = self._surv(s.gamma, self.lin_cov, s.alpha, self.node_fixed + node_random,
                                  self.event_fixed + event_random)
            else:
                surv = self.surv
            log_ratio = log_ratio + long - self.long + surv - self.surv
        log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
        accept = np.log(self.rng.uniform(size=d.n)) < np.minimum(0.0, log_ratio)

        s.b = np.where(accept[:, None], proposal, s.b)
        self.re = np.where(accept, re, self.re)
        if self.lik:
            obs_accept = accept[d.obs_subject]
            self.zb = np.where(obs_accept, zb, self.zb)
            self.long = np.where(accept, long, self.long)
            self.surv = np.where(accept, surv, self.surv)
            node_accept = accept[d.node_subject][:, None]
            self.node_random = np.where(node_accept, node_random, self.node_random)
            self.event_random = np.where(accept[:, None], event_random, self.event_random)
        else:
            self.zb = d.random_part(s.b)
            self.node_random, self.event_random = d.association_random(s.b)

        if adapting:
            self.b_log_scale += (accept.astype(float) - self.mcmc.target_accept_block) / (iteration + 1) ** 0.6
        else:
            self.b_proposed += 1
            self.b_accepted += accept

    def update_sigma2(self):
        s, d = self.state, self.data
        if self.lik:
            s.sigma2 = gibbs_sigma2(d.y - self.xb - self.zb, self.prior, self.rng)
            self.long = d.long_loglik(self.xb, self.zb, s.sigma2)
        else:
            s.sigma2 = gibbs_sigma2(np.empty(0), self.prior, self.rng)

    def update_D(self, iteration: int = 0, adapting: bool = False):
        s = self.state
        if self.d_proposal is None:
            s.D = gibbs_random_effects_cov(s.b, self.prior, self.rng)
            self.re = self.data.re_logdensity(s.b, s.D)
            return
        current = cholesky_params(s.D)
        proposal = self.d_proposal.propose(current)
        log_ratio = d_log_conditional(proposal, s.b, self.prior) - d_log_conditional(current, s.b, self.prior)
        accepted = self._accept(log_ratio)
        if accepted:
            s.D = cov_from_cholesky_params(proposal)
            self.re = self.data.re_logdensity(s.b, s.D)
        self.d_proposal.record(accepted, proposal if accepted else current, iteration, adapting)

    def update_survival_coefficients(self, iteration: int, adapting: bool):
        if self.surv_proposal is None:
            return
        s, d, prior = self.state, self.data, self.prior
        c = len(d.covariates)
        current = np.concatenate([s.omega, s.alpha])
        proposal = self.surv_proposal.propose(current)
        omega, alpha = proposal[:c], proposal[c:]
        log_ratio = float(np.sum(stats.norm.logpdf(omega, 0.0, prior.omega_sd) - stats.norm.logpdf(s.omega, 0.0, prior.omega_sd))
                          + np.sum(stats.norm.logpdf(alpha, 0.0, prior.alpha_sd) - stats.norm.logpdf(s.alpha, 0.0, prior.alpha_sd)))
        lin_cov = d.W @ omega
        if self.lik:
            surv = self._surv(s.gamma, lin_cov, alpha, self.node_fixed + self.node_random,
                              self.event_fixed + self.event_random)
            log_ratio += float(surv.sum() - self.surv.sum())
        accepted = self._accept(log_ratio)
        if accepted:
            s.omega, s.alpha, self.lin_cov = omega, alpha, lin_cov
            if self.lik:
                self.surv = surv
        self.surv_proposal.record(accepted, np.concatenate([s.omega, s.alpha]), iteration, adapting)

    def update_gamma(self, iteration: int, adapting: bool):
        s, d = self.state, self.data
        proposal = self.gamma_proposal.propose(s.gamma)
        log_ratio = (smoothing_log_prior(proposal, s.tau, d.penalty, self.prior, d.penalty_rank)
                     - smoothing_log_prior(s.gamma, s.tau, d.penalty, self.prior, d.penalty_rank))
        if self.lik:
            surv = self._surv(proposal, self.lin_cov, s.alpha, self.node_fixed + self.node_random,
                              self.event_fixed + self.event_random)
            log_ratio += float(surv.sum() - self.surv.sum())
        accepted = self._accept(log_ratio)
        if accepted:
            s.gamma = proposal
            if self.lik:
                self.surv = surv
        self.gamma_proposal.record(accepted, s.gamma, iteration, adapting)

    def update_tau(self):
        self.state.tau = gibbs_smoothing_precision(self.state.gamma, self.data.penalty, self.prior, self.rng,
                                                    self.data.penalty_rank)

    def step(self, iteration: int, adapting: bool):
        self.update_beta(iteration, adapting)
        self.update_random_effects(iteration, adapting)
        self.update_sigma2()
        self.update_D(iteration, adapting)
        self.update_survival_coefficients(iteration, adapting)
        self.update_gamma(iteration, adapting)
        self.update_tau()

    def acceptance(self) -> Dict[str, float]:
        rates = {"beta": self.beta_proposal.acceptance_rate, "gamma": self.gamma_proposal.acceptance_rate}
        if self.surv_proposal is not None:
            rates["omega_alpha"] = self.surv_proposal.acceptance_rate
        if self.d_proposal is not None:
            rates["D"] = self.d_proposal.acceptance_rate
        rates["b"] = float(self.b_accepted.mean() / self.b_proposed) if self.b_proposed else float("nan")
        return rates

    def run(self) -> Dict[str, object]:
        mcmc = self.mcmc
        burn_in = mcmc.n_burn_in
        initial = self.log_posterior()
        if not np.isfinite(initial):
            raise InitializationError(self._diagnose_initial())
        values, b_draws, iterations = [], [], []
        for it in range(mcmc.n_iterations):
            adapting = it < burn_in
            self.step(it, adapting)
            if not adapting and (it - burn_in) % mcmc.thin == 0:
                values.append(flatten_state(self.state))
                b_draws.append(self.state.b.copy())
                iterations.append(it)
            if mcmc.progress_every and (it + 1) % mcmc.progress_every == 0:
                logger.info(f"Chain {self.chain_id}: iteration {it + 1}/{mcmc.n_iterations}, "
                            f"log posterior={self.log_posterior():.2f}")
        return {
            "values": np.array(values).reshape(len(values), -1),
            "b": np.array(b_draws).reshape(len(b_draws), self.data.n, 2),
            "iteration": np.array(iterations, dtype=int),
            "acceptance": self.acceptance(),
        }

    def _diagnose_initial(self) -> str:
        s = self.state
        parts = {
            "prior": log_prior(s.beta, s.sigma2, s.D, s.omega, s.alpha, s.gamma, s.tau, self.prior,
                               self.data.penalty, self.data.penalty_rank),
            "random effects": float(self.re.sum()),
            "longitudinal": float(self.long.sum()),
            "survival": float(self.surv.sum()),
        }
        bad = [name for name, value in parts.items() if not np.isfinite(value)]
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        worst = ""
        if not np.isfinite(self.surv).all():
            worst = f"; first non-finite survival term for subject {self.data.subject_ids[int(np.argmin(np.isfinite(self.surv)))]}"
        return f"log posterior not finite at initial values (non-finite: {bad}; {detail}){worst}"


@dataclass
class PosteriorDraws:
    """Retained draws of all chains, stacked in chain order."""
    spec: ModelSpec
    basis: SplineBasis
    param_names: List[str]
    values: np.ndarray  # (K, P)
    b: np.ndarray  # (K, n_subjects, 2)
    subject_ids: List[str]
    chain: np.ndarray
    iteration: np.ndarray
    age_mean: float = 0.0
    age_sd: float = 1.0
    acceptance: Dict[str, Dict[str, float]] = field(default_factory=dict)
    penalty_order: int = 2

    @property
    def n_draws(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.param_names.index(name)]

    def block(self, prefix: str) -> np.ndarray:
        idx = [j for j, n in enumerate(self.param_names) if n.startswith(prefix + ".")]
        return self.values[:, idx]

    def by_chain(self, name: str) -> np.ndarray:
        """(n_chains, draws_per_chain) matrix, truncated to the shortest chain."""
        column = self.column(name)
        parts = [column[self.chain == c] for c in np.unique(self.chain)]
        length = min(len(p) for p in parts)
        return np.vstack([p[:length] for p in parts])

    def subject_index(self, subject_id: str) -> int:
        return self.subject_ids.index(subject_id)

    def long_params(self, k: int) -> LongitudinalParams:
        return LongitudinalParams(self.spec.longitudinal_terms, self.block("beta")[k].copy(),
                                  float(np.sqrt(self.column("sigma2")[k])))

    def D(self, k: int) -> np.ndarray:
        d11, d12, d22 = (self.column(n)[k] for n in ("D.1.1", "D.1.2", "D.2.2"))
        return np.array([[d11, d12], [d12, d22]])

    def surv_params(self, k: int) -> SurvivalParams:
        omega = self.block("omega")[k].copy() if self.spec.survival_covariates else np.empty(0)
        alpha = {a: float(self.column(f"alpha.{a}")[k]) for a in self.spec.association}
        baseline = SplineBaseline(self.basis, self.block("gamma")[k].copy())
        return SurvivalParams(self.spec.survival_covariates, omega, alpha, baseline, float(self.column("tau")[k]))

    def state(self, k: int) -> JointState:
        alpha = np.array([self.column(f"alpha.{a}")[k] for a in self.spec.association])
        omega = self.block("omega")[k].copy() if self.spec.survival_covariates else np.empty(0)
        return JointState(self.block("beta")[k].copy(), float(self.column("sigma2")[k]), self.D(k),
                          self.b[k].copy(), omega, alpha, self.block("gamma")[k].copy(), float(self.column("tau")[k]))

    def select(self, indices: Sequence[int]) -> "PosteriorDraws":
        idx = np.asarray(indices, dtype=int)
        return PosteriorDraws(self.spec, self.basis, list(self.param_names), self.values[idx], self.b[idx],
                              list(self.subject_ids), self.chain[idx], self.iteration[idx], self.age_mean,
                              self.age_sd, dict(self.acceptance), self.penalty_order)

    def thinned(self, max_draws: Optional[int]) -> "PosteriorDraws":
        """Evenly spaced subset of at most `max_draws` draws."""
        if max_draws is None or max_draws >= self.n_draws:
            return self
        return self.select(np.linspace(0, self.n_draws - 1, max_draws).round().astype(int))

    @classmethod
    def from_params(cls, spec: ModelSpec, basis: SplineBasis, params: JointParams, n_draws: int,
                    subject_ids: Sequence[str] = (), b: Optional[np.ndarray] = None,
                    age_mean: float = 0.0, age_sd: float = 1.0) -> "PosteriorDraws":
        """Degenerate posterior repeating one parameter value."""
        names = parameter_names(spec, basis.n_basis)
        baseline = params.surv_params.baseline
        if not isinstance(baseline, SplineBaseline):
            raise ModelFitError("posterior draws need a spline baseline", term="baseline")
        state = JointState(
            np.array([params.long_params.coef(t) for t in spec.longitudinal_terms]), params.long_params.sigma ** 2,
            np.asarray(params.D, dtype=float), np.zeros((len(subject_ids), 2)),
            np.asarray(params.surv_params.omega, dtype=float),
            np.array([params.surv_params.alpha.get(a, 0.0) for a in spec.association]),
            np.asarray(baseline.gamma, dtype=float),
            params.surv_params.tau if params.surv_params.tau is not None else 1.0)
        row = flatten_state(state)
        b_all = np.zeros((len(subject_ids), 2)) if b is None else np.asarray(b, dtype=float)
        return cls(spec, basis, names, np.tile(row, (n_draws, 1)), np.tile(b_all, (n_draws, 1, 1)),
                   list(subject_ids), np.zeros(n_draws, dtype=int), np.arange(n_draws), age_mean, age_sd)

    def metadata(self) -> Dict[str, object]:
        return {
            "model": self.spec.model_dump(mode="json"),
            "knots": self.basis.knots.tolist(),
            "degree": self.basis.degree,
            "subject_ids": list(self.subject_ids),
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
            "acceptance": self.acceptance,
            "penalty_order": self.penalty_order,
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.param_names)
        b_flat = self.b.reshape(self.n_draws, -1)
        b_names = [f"b.{sid}.{j}" for sid in self.subject_ids for j in (0, 1)]
        frame = pd.concat([frame, pd.DataFrame(b_flat, columns=b_names)], axis=1)
        frame.insert(0, "iteration", self.iteration)
        frame.insert(0, "chain", self.chain)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, metadata: Dict[str, object]) -> "PosteriorDraws":
        spec = ModelSpec.model_validate(metadata["model"])
        basis = SplineBasis(np.asarray(metadata["knots"], dtype=float), int(metadata["degree"]))
        names = parameter_names(spec, basis.n_basis)
        missing = [n for n in names if n not in frame.columns]
        if missing:
            raise ModelFitError(f"draws file lacks columns {missing[:5]}", term=missing[0])
        subject_ids = [str(s) for s in metadata["subject_ids"]]
        b_names = [f"b.{sid}.{j}" for sid in subject_ids for j in (0, 1)]
        b = frame[b_names].to_numpy(dtype=float).reshape(len(frame), len(subject_ids), 2)
        return cls(spec, basis, names, frame[names].to_numpy(dtype=float), b, subject_ids,
                   frame["chain"].to_numpy(dtype=int), frame["iteration"].to_numpy(dtype=int),
                   float(metadata.get("age_mean", 0.0)), float(metadata.get("age_sd", 1.0)),
                   dict(metadata.get("acceptance", {})), int(metadata.get("penalty_order", 2)))


def initial_state(data: JointData, cohort: Cohort, spec: ModelSpec) -> Tuple[JointState, Dict[str, np.ndarray]]:
    """Warm start from a standalone LMM fit; returns the state and proposal sds."""
    p = len(data.terms)
    try:
        long_params, D, fit = fit_longitudinal_lmm(cohort, spec)
        beta = np.array([long_params.coef(t) for t in data.terms])
        sigma2 = long_params.sigma ** 2
        beta_sd = np.array([fit.fixed_effects_se.get(t, 0.05) for t in data.terms])
        D = D + 1e-6 * np.eye(2)
    except (ModelFitError, NumericalError, np.linalg.LinAlgError) as e:
        logger.warning(f"LMM warm start failed ({e}); starting from least squares")
        beta, *_ = np.linalg.lstsq(data.X, data.y, rcond=None)
        sigma2 = float(np.var(data.y - data.X @ beta)) or 1.0
        beta_sd = np.full(p, 0.05)
        D = np.diag([sigma2, 0.01 * sigma2])
    exposure = float(np.sum(data.T - data.entry))
    events = float(data.delta.sum())
    level = np.log(max(events, 0.5) / max(exposure, 1e-8))
    state = JointState(
        beta=beta, sigma2=float(sigma2), D=D, b=np.zeros((data.n, 2)),
        omega=np.zeros(len(data.covariates)), alpha=np.zeros(len(data.associations)),
        gamma=np.full(data.basis.n_basis, level), tau=1.0,
    )
    sds = {"beta": np.maximum(beta_sd, 1e-4),
           "omega_alpha": np.full(len(data.covariates) + len(data.associations), 0.1),
           "gamma": np.full(data.basis.n_basis, 0.1)}
    return state, sds


def _dispersed(state: JointState, sds: Dict[str, np.ndarray], rng: np.random.Generator, chain_id: int) -> JointState:
    """Overdispersed start for chains after the first; variances move on the log scale."""
    start = state.copy()
    if chain_id == 0:
        return start
    start.beta = start.beta + 2.0 * sds["beta"] * rng.standard_normal(start.beta.size)
    start.sigma2 = float(start.sigma2 * np.exp(0.5 * rng.standard_normal()))
    start.D = cov_from_cholesky_params(cholesky_params(start.D) + 0.25 * rng.standard_normal(3))
    c = start.omega.size
    jitter = 2.0 * sds["omega_alpha"] * rng.standard_normal(c + start.alpha.size)
    start.omega = start.omega + jitter[:c]
    start.alpha = start.alpha + jitter[c:]
    start.gamma = start.gamma + 2.0 * sds["gamma"] * rng.standard_normal(start.gamma.size)
    return start


def _run_chain(data: JointData, prior: PriorSpec, mcmc: McmcConfig, init: JointState,
               sds: Dict[str, np.ndarray], seed: np.random.SeedSequence, chain_id: int) -> Dict[str, object]:
    rng = np.random.default_rng(seed)
    start = _dispersed(init, sds, rng, chain_id)
    with ComponentProfiler("mcmc", "chain", {"chain": chain_id, "iterations": mcmc.n_iterations}):
        sampler = ChainSampler(data, prior, mcmc, start, rng, chain_id, sds)
        result = sampler.run()
    logger.info(f"Chain {chain_id} done: acceptance " + ", ".join(f"{k}={v:.3f}" for k, v in result["acceptance"].items()))
    return result


async def _run_chains(data, prior, mcmc, init, sds) -> List[Dict[str, object]]:
    seeds = np.random.SeedSequence(mcmc.seed).spawn(mcmc.n_chains)
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=max(1, min(mcmc.threads, mcmc.n_chains))) as pool:
        tasks = [loop.run_in_executor(pool, _run_chain, data, prior, mcmc, init, sds, seeds[c], c)
                 for c in range(mcmc.n_chains)]
        return await asyncio.gather(*tasks)


@profile_mcmc
def run_mcmc(cohort: Cohort, model_spec: ModelSpec, prior_spec: Optional[PriorSpec] = None,
             mcmc_config: Optional[McmcConfig] = None, spline_config: Optional[SplineConfig] = None,
             basis: Optional[SplineBasis] = None) -> PosteriorDraws:
    """Sample the joint posterior with all chains; returns post-burn-in draws."""
    prior = prior_spec or PriorSpec()
    mcmc = mcmc_config or McmcConfig()
    spline = spline_config or SplineConfig()
    basis = basis or build_basis(cohort, spline)
    with ComponentProfiler("mcmc", "prepare", {"subjects": len(cohort)}):
        data = JointData(cohort, model_spec, basis, spline.quadrature_refine, spline.penalty_order)
        init, sds = initial_state(data, cohort, model_spec)
    logger.info(f"Running {mcmc.n_chains} chain(s) x {mcmc.n_iterations} iterations "
                f"(burn-in {mcmc.n_burn_in}, thin {mcmc.thin}) for model {model_spec.name}")
    results = asyncio.run(_run_chains(data, prior, mcmc, init, sds))

    values = np.vstack([r["values"] for r in results])
    b = np.concatenate([r["b"] for r in results], axis=0)
    chain = np.concatenate([np.full(len(r["iteration"]), c) for c, r in enumerate(results)])
    iteration = np.concatenate([r["iteration"] for r in results])
    acceptance = {f"chain{c}": r["acceptance"] for c, r in enumerate(results)}
    draws = PosteriorDraws(model_spec, basis, parameter_names(model_spec, basis.n_basis), values, b,
                           cohort.subject_ids, chain, iteration, cohort.age_mean, cohort.age_sd, acceptance,
                           spline.penalty_order)
    logger.info(f"Retained {draws.n_draws} draws from {mcmc.n_chains} chain(s)")
    return draws
