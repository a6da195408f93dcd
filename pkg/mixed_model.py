"""
Gaussian linear mixed-effects model fitted by maximum likelihood.

Thin layer over statsmodels MixedLM: term-level identifiability checks before
the fit, a variance floor on the returned components, and name-keyed results.
Shared by the BMI imputation model and the longitudinal warm start.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from statsmodels.regression.mixed_linear_model import MixedLM

from errors import ModelFitError, NumericalError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10


@dataclass
class MixedModelFit:
    fixed_effects: Dict[str, float]
    fixed_effects_se: Dict[str, float]
    random_effects_cov: np.ndarray
    residual_variance: float
    random_effects: Dict[Hashable, np.ndarray]
    log_likelihood: float
    converged: bool
    x_names: List[str]
    z_names: List[str]
    dropped_terms: List[str] = field(default_factory=list)

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.fixed_effects[name] for name in self.x_names])

    def random_effect(self, group: Hashable) -> np.ndarray:
        """BLUP for a group; groups not in the fit get zero (population prediction)."""
        return self.random_effects.get(group, np.zeros(len(self.z_names)))


def _identify_fixed_effects(X: np.ndarray, names: List[str], drop_constant: bool) -> Tuple[np.ndarray, List[str], List[str]]:
    dropped = []
    if drop_constant:
        keep = []
        for j, name in enumerate(names):
            column = X[:, j]
            if j > 0 and np.ptp(column) == 0:
                dropped.append(name)
            else:
                keep.append(j)
        X = X[:, keep]
        names = [names[j] for j in keep]
    rank = 0
    for j, name in enumerate(names):
        new_rank = np.linalg.matrix_rank(X[:, : j + 1])
        if new_rank == rank:
            raise ModelFitError(f"fixed effect '{name}' is not identifiable (collinear with earlier terms)", term=name)
        rank = new_rank
    return X, names, dropped


def _floor_covariance(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    values, vectors = np.linalg.eigh(cov)
    return (vectors * np.maximum(values, VARIANCE_FLOOR)) @ vectors.T


def _fit_mixedlm(model: MixedLM, max_iter: int):
    """ML fit with lbfgs, falling back to powell when lbfgs fails outright."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = model.fit(reml=False, method="lbfgs", maxiter=max_iter)
        except (np.linalg.LinAlgError, ValueError) as e:
            logger.warning(f"lbfgs mixed-model fit failed ({e}); retrying with powell")
            result = model.fit(reml=False, method="powell", maxiter=max_iter)
    for w in caught:
        logger.warning(f"MixedLM: {w.message}")
    return result


def _single_group_fit(y, X, names, z_names, group) -> MixedModelFit:
    """One group: random effects are not estimable, so the model reduces to OLS with zero BLUPs."""
    result = sm.OLS(y, X).fit()
    q = len(z_names)
    s2 = max(float(np.mean(result.resid ** 2)), VARIANCE_FLOOR)
    return MixedModelFit(
        fixed_effects=dict(zip(names, np.asarray(result.params, dtype=float).tolist())),
        fixed_effects_se=dict(zip(names, np.nan_to_num(np.asarray(result.bse, dtype=float)).tolist())),
        random_effects_cov=VARIANCE_FLOOR * np.eye(q),
        residual_variance=s2,
        random_effects={group: np.zeros(q)},
        log_likelihood=float(result.llf) if np.isfinite(result.llf) else float("inf"),
        converged=True,
        x_names=names,
        z_names=list(z_names),
    )


def fit_linear_mixed_model(y: np.ndarray, X: np.ndarray, Z: np.ndarray, groups: Sequence[Hashable],
                           x_names: Sequence[str], z_names: Sequence[str],
                           drop_constant_covariates: bool = False, max_iter: int = 500) -> MixedModelFit:
    """ML fit of y = X beta + Z u_g + e with u_g ~ N(0, D), e ~ N(0, s2 I)."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if not (len(y) == X.shape[0] == Z.shape[0] == len(groups)):
        raise ValueError("y, X, Z and groups must have the same number of rows")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)) or not np.all(np.isfinite(Z)):
        raise NumericalError("non-finite values in mixed-model inputs")

    X, names, dropped = _identify_fixed_effects(X, list(x_names), drop_constant_covariates)
    if dropped:
        logger.warning(f"Dropping constant fixed effects: {dropped}")
    group_sizes = pd.Series(list(groups)).value_counts()
    if len(group_sizes) == 1:
        logger.warning("Mixed model with a single group; fitting fixed effects only")
        return _single_group_fit(y, X, names, z_names, group_sizes.index[0])
    if Z.shape[1] > 1 and group_sizes.max() < 2:
        raise ModelFitError("random slope is not identifiable: every group has a single observation",
                            term=f"random {z_names[1]}")

    model = MixedLM(pd.Series(y, name="y"), pd.DataFrame(X, columns=names), groups=np.asarray(groups),
                    exog_re=pd.DataFrame(Z, columns=list(z_names)))
    result = _fit_mixedlm(model, max_iter)
    if not np.all(np.isfinite(result.fe_params)):
        raise NumericalError("mixed-model fit produced non-finite fixed effects")

    beta = np.asarray(result.fe_params, dtype=float)
    se = np.asarray(result.bse_fe, dtype=float)
    blups = {g: np.asarray(u, dtype=float) for g, u in result.random_effects.items()}
    fit = MixedModelFit(
        fixed_effects=dict(zip(names, beta.tolist())),
        fixed_effects_se=dict(zip(names, se.tolist())),
        random_effects_cov=_floor_covariance(np.asarray(result.cov_re, dtype=float)),
        residual_variance=max(float(result.scale), VARIANCE_FLOOR),
        random_effects=blups,
        log_likelihood=float(result.llf),
        converged=bool(result.converged),
        x_names=names,
        z_names=list(z_names),
        dropped_terms=dropped,
    )
    if not fit.converged:
        logger.warning("Mixed-model optimizer did not report convergence")
    logger.info(f"Mixed model: {len(group_sizes)} groups, {len(y)} obs, loglik={fit.log_likelihood:.3f}, "
                f"s2={fit.residual_variance:.4g}, converged={fit.converged}")
    return fit
