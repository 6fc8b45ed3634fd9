"""Parametric bootstrap for the mixture fit: simulate from the fitted model, refit, summarize."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from config import Config
from estimation.em_engine import fit
from estimation.mixture import ExperimentData
from models.data_models import CONDITION_LABELS, BootstrapSummary, FitConfig, FitResult, GaussianLinear
from models.errors import BootstrapFailedError, ConfigError, SpilloverError

logger = logging.getLogger(__name__)


def simulate_outcomes(data: ExperimentData, fit_result: FitResult, rng: np.random.Generator) -> np.ndarray:
    """One outcome vector from the fitted model, treatment and observed networks held fixed.

    Each subject's latent (condition, degree) is drawn from tau at the fitted
    (p, q), then y from the outcome family at that cell.
    """
    tau = data.tau(fit_result.mismeasure)[data.profile_of].reshape(data.n_subjects, -1)
    cumulative = np.cumsum(tau, axis=1)
    u = rng.random(data.n_subjects) * cumulative[:, -1]
    cell = np.minimum((cumulative < u[:, None]).sum(axis=1), tau.shape[1] - 1)
    condition, degree = np.divmod(cell, data.n_degrees)
    family = fit_result.family
    eta = np.asarray(family.alpha)[condition] + np.asarray(family.beta)[condition] * degree
    if isinstance(family, GaussianLinear):
        return rng.normal(eta, np.sqrt(family.sigma2))
    return rng.binomial(family.trials, expit(eta)).astype(float)


def _quantities(result: FitResult) -> Dict[str, float]:
    values = {f"mean:{label}": result.mean_outcomes[label] for label in CONDITION_LABELS}
    values.update({f"contrast:{name}": value for name, value in result.contrasts.items()})
    values["p"] = result.mismeasure.p
    values["q"] = result.mismeasure.q
    return values


def parametric_bootstrap(
    fit_result: FitResult,
    data: ExperimentData,
    config: Optional[FitConfig] = None,
    m_reps: int = Config.BOOTSTRAP_REPS,
    seed: int = 0,
    level: float = Config.CI_LEVEL,
) -> BootstrapSummary:
    """Standard errors and percentile intervals for means, contrasts, p and q.

    Replicates refit by EM from the fitted parameters with
    config.bootstrap_starts starts. Failed refits are dropped and counted; more
    than BOOTSTRAP_MAX_FAILURE of them is an error.
    """
    if m_reps < 2:
        raise ConfigError(f"bootstrap needs at least 2 replicates, got {m_reps}")
    config = config or FitConfig()
    refit_config = config.model_copy(update={"n_starts": config.bootstrap_starts, "threads": 1})
    initial = (fit_result.family, fit_result.mismeasure)
    seeds = np.random.SeedSequence(seed).spawn(m_reps)

    def replicate(index: int):
        rng = np.random.default_rng(seeds[index])
        y = simulate_outcomes(data, fit_result, rng)
        try:
            replicate_config = refit_config.model_copy(update={"seed": seed + index + 1})
            refit = fit(data.with_outcomes(y), replicate_config, initial=initial)
        except (SpilloverError, ValueError, FloatingPointError) as exc:
            logger.debug("bootstrap replicate %d failed: %s", index, exc)
            return None
        return _quantities(refit)

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        replicates = list(pool.map(replicate, range(m_reps)))

    kept = [r for r in replicates if r is not None]
    n_failed = m_reps - len(kept)
    if n_failed:
        logger.warning("%d of %d bootstrap replicates failed and were dropped", n_failed, m_reps)
    if n_failed > Config.BOOTSTRAP_MAX_FAILURE * m_reps or len(kept) < 2:
        raise BootstrapFailedError(f"{n_failed} of {m_reps} bootstrap replicates failed")

    names = list(kept[0])
    table = np.array([[r[name] for name in names] for r in kept])
    se = np.std(table, axis=0, ddof=1)
    low, high = np.quantile(table, [(1.0 - level) / 2.0, (1.0 + level) / 2.0], axis=0)
    return BootstrapSummary(
        n_reps=m_reps,
        n_failed=n_failed,
        level=level,
        se=dict(zip(names, se.tolist())),
        ci_low=dict(zip(names, low.tolist())),
        ci_high=dict(zip(names, high.tolist())),
    )
