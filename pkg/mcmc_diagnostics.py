"""
Convergence diagnostics and posterior summaries.

Split R-hat and the autocorrelation effective sample size come from arviz;
the wrappers here only settle the degenerate cases (constant chains, too few
draws) the way the diagnostics table reports them.
"""

import logging
from typing import Dict, Optional, Union

import arviz as az
import numpy as np
import pandas as pd

from bayes_engine import PosteriorDraws
from errors import UndefinedMetricError
from model_spec import TERM_LABELS

logger = logging.getLogger(__name__)

ChainsLike = Union[PosteriorDraws, np.ndarray]


def split_rhat(chains: np.ndarray) -> float:
    """Split R-hat of one scalar from an (m, n) array of chains."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[0] < 2:
        raise UndefinedMetricError("R-hat needs at least 2 chains")
    half = chains.shape[1] // 2
    if half < 1:
        raise UndefinedMetricError("split R-hat needs at least 2 draws per chain")
    split = np.vstack([chains[:, :half], chains[:, -half:]])
    within = float(split.var(axis=1, ddof=1).mean()) if half > 1 else 0.0
    if within == 0.0:
        return 1.0 if np.ptp(split.mean(axis=1)) == 0.0 else float("inf")
    return float(az.rhat(chains, method="split"))


def ess_chains(chains: np.ndarray) -> float:
    """Multi-chain autocorrelation ESS (arviz "mean" method), capped at the draw count."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    total = m * n
    if n < 4:
        return float(total)
    if np.ptp(chains) == 0.0:
        return 1.0
    value = float(az.ess(chains, method="mean"))
    if not np.isfinite(value):
        return 1.0
    return float(min(value, total))


def gelman_rubin(draws: ChainsLike) -> Union[Dict[str, float], float]:
    """Split R-hat per population parameter (or for one (m, n) array)."""
    if isinstance(draws, np.ndarray):
        return split_rhat(draws)
    if draws.n_chains < 2:
        raise UndefinedMetricError("R-hat needs at least 2 chains")
    return {name: split_rhat(draws.by_chain(name)) for name in draws.param_names}


def effective_sample_size(draws: ChainsLike) -> Union[Dict[str, float], float]:
    if isinstance(draws, np.ndarray):
        return ess_chains(draws)
    return {name: ess_chains(draws.by_chain(name)) for name in draws.param_names}


def tail_probability(samples: np.ndarray) -> float:
    """Two-sided posterior tail probability 2 min(P(x > 0), P(x < 0))."""
    samples = np.asarray(samples, dtype=float)
    return float(min(1.0, 2.0 * min(np.mean(samples > 0), np.mean(samples < 0))))


def _summary_row(submodel: str, name: str, label: str, samples: np.ndarray, level: float) -> Dict[str, object]:
    lo, hi = np.quantile(samples, [(1 - level) / 2, (1 + level) / 2])
    return {
        "submodel": submodel,
        "parameter": name,
        "label": label,
        "mean": float(np.mean(samples)),
        "sd": float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0,
        "lower": float(lo),
        "upper": float(hi),
        "tail_probability": tail_probability(samples),
    }


def summarize_posterior(draws: PosteriorDraws, credible_level: float = 0.95,
                        include_nuisance: bool = False) -> pd.DataFrame:
    """Posterior summary table: longitudinal rows then survival rows."""
    rows = []
    for term in draws.spec.longitudinal_terms:
        rows.append(_summary_row("longitudinal", f"beta.{term}", TERM_LABELS[term],
                                 draws.column(f"beta.{term}"), credible_level))
    rows.append(_summary_row("longitudinal", "sigma", "Residual sd (sigma)",
                             np.sqrt(draws.column("sigma2")), credible_level))
    for cov in draws.spec.survival_covariates:
        rows.append(_summary_row("survival", f"omega.{cov}", TERM_LABELS[cov],
                                 draws.column(f"omega.{cov}"), credible_level))
    for assoc in draws.spec.association:
        rows.append(_summary_row("survival", f"alpha.{assoc}", TERM_LABELS[assoc],
                                 draws.column(f"alpha.{assoc}"), credible_level))
    if include_nuisance:
        for name in ("D.1.1", "D.1.2", "D.2.2", "tau"):
            rows.append(_summary_row("nuisance", name, name, draws.column(name), credible_level))
        for name in draws.param_names:
            if name.startswith("gamma."):
                rows.append(_summary_row("nuisance", name, f"log baseline spline {name[6:]}",
                                         draws.column(name), credible_level))
    return pd.DataFrame(rows)


def diagnostics_table(draws: PosteriorDraws, rhat_threshold: float = 1.05) -> pd.DataFrame:
    ess = effective_sample_size(draws)
    rhat = gelman_rubin(draws) if draws.n_chains > 1 else {name: float("nan") for name in draws.param_names}
    frame = pd.DataFrame({
        "parameter": draws.param_names,
        "rhat": [rhat[n] for n in draws.param_names],
        "ess": [ess[n] for n in draws.param_names],
    })
    frame["converged"] = frame["rhat"].isna() | (frame["rhat"] < rhat_threshold)
    frame["flag"] = np.where(frame["ess"] <= 1.0, "constant", np.where(frame["converged"], "", "rhat"))
    n_bad = int((~frame["converged"]).sum())
    if n_bad:
        logger.warning(f"{n_bad} parameter(s) with R-hat >= {rhat_threshold}: "
                       f"{frame.loc[~frame['converged'], 'parameter'].tolist()[:10]}")
    return frame


def max_rhat(diagnostics: pd.DataFrame) -> Optional[float]:
    values = diagnostics["rhat"].dropna()
    return float(values.max()) if len(values) else None
