"""Beta-binomial prior over latent connection counts."""

import logging
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from models.data_models import BetaBinomialPrior, PriorConfig
from models.errors import ConfigError

logger = logging.getLogger(__name__)

# Largest rho moment matching will return; rho = 1 is the degenerate all-or-nothing law
MAX_RHO = 1.0 - 1e-6
# Below this rho the mixing Beta is numerically a point mass and the binomial is used
BINOMIAL_RHO = 1e-8


def beta_params(prior: BetaBinomialPrior) -> Tuple[float, float]:
    """(a, b) of the mixing Beta for mean mu and intra-class correlation rho"""
    if prior.rho == 0.0:
        return np.inf, np.inf
    scale = (1.0 - prior.rho) / prior.rho
    return prior.mu * scale, (1.0 - prior.mu) * scale


@lru_cache(maxsize=4096)
def _logpmf_table(mu: float, rho: float, size: int) -> np.ndarray:
    k = np.arange(size + 1)
    if rho < BINOMIAL_RHO or mu in (0.0, 1.0):
        table = stats.binom.logpmf(k, size, mu)
    else:
        scale = (1.0 - rho) / rho
        table = stats.betabinom.logpmf(k, size, mu * scale, (1.0 - mu) * scale)
    table = np.asarray(table, dtype=float)
    table.setflags(write=False)
    return table


def logpmf_table(prior: BetaBinomialPrior) -> np.ndarray:
    """log pmf over the full support 0..size (read-only, shared)"""
    return _logpmf_table(float(prior.mu), float(prior.rho), int(prior.size))


def pmf_table(prior: BetaBinomialPrior) -> np.ndarray:
    return np.exp(logpmf_table(prior))


def logpmf(prior: BetaBinomialPrior, k) -> np.ndarray:
    """log pmf at k; -inf outside [0, size]"""
    scalar = np.ndim(k) == 0
    k = np.atleast_1d(np.asarray(k))
    table = logpmf_table(prior)
    inside = (k >= 0) & (k <= prior.size)
    out = np.full(k.shape, -np.inf)
    out[inside] = table[k[inside].astype(np.int64)]
    return float(out[0]) if scalar else out


def pmf(prior: BetaBinomialPrior, k) -> np.ndarray:
    return np.exp(logpmf(prior, k))


def mean(prior: BetaBinomialPrior) -> float:
    return prior.size * prior.mu


def variance(prior: BetaBinomialPrior) -> float:
    n = prior.size
    return n * prior.mu * (1.0 - prior.mu) * (1.0 + (n - 1) * prior.rho)


def moment_match(
    degrees: Sequence[int],
    size: int,
    mu_override: Optional[float] = None,
    rho_override: Optional[float] = None,
) -> BetaBinomialPrior:
    """Prior whose mean and variance match an observed degree sample.

    mu is the override when given, otherwise mean(degrees) / size. rho solves
    size*mu*(1-mu)*(1 + (size-1)*rho) = sample variance and is clamped to
    [0, 1); a negative solution (underdispersion) sets the flag.
    """
    degrees = np.asarray(degrees, dtype=float)
    if degrees.size == 0:
        raise ConfigError("moment matching needs at least one degree")
    if size < 0:
        raise ConfigError(f"prior size must be nonnegative, got {size}")
    if size == 0:
        mu = 0.0 if mu_override is None else mu_override
        return BetaBinomialPrior(mu=mu, rho=rho_override or 0.0, size=0)

    mu = float(np.clip(degrees.mean() / size, 0.0, 1.0)) if mu_override is None else float(mu_override)
    if rho_override is not None:
        return BetaBinomialPrior(mu=mu, rho=rho_override, size=size)

    sample_var = float(degrees.var(ddof=1)) if degrees.size > 1 else 0.0
    binomial_var = size * mu * (1.0 - mu)
    if binomial_var == 0.0 or size == 1:
        return BetaBinomialPrior(mu=mu, rho=0.0, size=size)

    rho = (sample_var / binomial_var - 1.0) / (size - 1)
    underdispersed = rho < 0.0
    if underdispersed:
        logger.warning(
            "observed degrees are underdispersed (variance %.4g < binomial %.4g); rho clamped to 0",
            sample_var,
            binomial_var,
        )
    rho = float(np.clip(rho, 0.0, MAX_RHO))
    return BetaBinomialPrior(mu=mu, rho=rho, size=size, underdispersed=underdispersed)


def truncated_support(prior: BetaBinomialPrior, tail_mass: Optional[float] = None) -> int:
    """Smallest d_max whose cumulative mass reaches 1 - tail_mass; size when tail_mass is None"""
    if tail_mass is None:
        return prior.size
    if not 0.0 < tail_mass <= 0.01:
        raise ConfigError(f"tail_mass must lie in (0, 0.01], got {tail_mass}")
    cdf = np.cumsum(pmf_table(prior))
    reached = np.flatnonzero(cdf >= 1.0 - tail_mass)
    return int(reached[0]) if reached.size else prior.size


def build_prior(config: PriorConfig, degrees: Sequence[int], size: int) -> BetaBinomialPrior:
    """Prior for one network (or stratum) from its config and observed degrees"""
    mu_override = config.mu if config.mode == "density" else None
    if config.mode == "density" and mu_override is None:
        raise ConfigError("prior mode 'density' needs mu")
    return moment_match(degrees, size, mu_override=mu_override, rho_override=config.rho)
