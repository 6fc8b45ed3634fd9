"""EM for the latent exposure mixture: E-step, M-steps, multi-start fitting and plug-in means."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, logsumexp, xlogy

from config import Config
from estimation.exposure import fit_hard_family
from estimation.mixture import ExperimentData, family_mean, joint_log_terms
from estimation.regression import logit_objective, weighted_linear, weighted_logit
from models.data_models import (
    CONDITION_LABELS,
    BinomialLogit,
    FitConfig,
    FitResult,
    GaussianLinear,
    MismeasureParams,
)
from models.errors import ConfigError, FitFailedError, LikelihoodUnderflowError, SpilloverError

logger = logging.getLogger(__name__)

CONTRAST_NAMES = ("direct", "network_intensive", "interaction")
START_P = 0.05
PERTURBATION = 0.2


def e_step(
    data: ExperimentData, family, params: MismeasureParams, tau: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, float]:
    """Responsibilities gamma (subjects, 4, degrees), proportional to tau * f, and the log-likelihood"""
    tau = data.tau(params) if tau is None else tau
    terms = joint_log_terms(data, family, tau)
    with np.errstate(divide="ignore"):
        per_subject = logsumexp(terms.reshape(data.n_subjects, -1), axis=1)
    bad = np.flatnonzero(~np.isfinite(per_subject))
    if bad.size:
        raise LikelihoodUnderflowError(int(bad[0]), f"y={data.y[bad[0]]:g}")
    gamma = np.exp(terms - per_subject[:, None, None])
    return gamma, float(np.sum(per_subject))


def _condition_stats(data: ExperimentData, gamma: np.ndarray, c: int) -> Tuple[np.ndarray, np.ndarray]:
    weight = gamma[:, c, :]
    return weight.sum(axis=0), data.y @ weight


def m_step_gaussian(data: ExperimentData, gamma: np.ndarray, previous: Optional[GaussianLinear] = None) -> GaussianLinear:
    """Closed-form weighted least squares per condition with a pooled variance"""
    degrees = data.degrees.astype(float)
    alpha, beta = [], []
    for c in range(4):
        weight, sums = _condition_stats(data, gamma, c)
        fallback = (previous.alpha[c], previous.beta[c]) if previous is not None else (float(data.y.mean()), 0.0)
        a, b, _ = weighted_linear(degrees, weight, sums, previous=fallback)
        alpha.append(a)
        beta.append(b)
    fitted = np.asarray(alpha)[:, None] + np.asarray(beta)[:, None] * degrees[None, :]
    residual = (data.y[:, None, None] - fitted[None, :, :]) ** 2
    sigma2 = float(np.sum(gamma * residual)) / data.n_subjects
    return GaussianLinear(alpha=tuple(alpha), beta=tuple(beta), sigma2=max(sigma2, Config.MIN_VARIANCE))


def m_step_binomial(data: ExperimentData, gamma: np.ndarray, previous: BinomialLogit) -> Tuple[BinomialLogit, List[str]]:
    """Weighted logistic regression per condition; keeps the previous values when Newton does not improve"""
    degrees = data.degrees.astype(float)
    alpha, beta, flags = [], [], []
    for c, label in enumerate(CONDITION_LABELS):
        weight, sums = _condition_stats(data, gamma, c)
        start = (previous.alpha[c], previous.beta[c])
        a, b, clamped = weighted_logit(degrees, weight, sums, previous.trials, start=start)
        before = logit_objective(start[0], start[1], degrees, weight, sums, previous.trials)
        after = logit_objective(a, b, degrees, weight, sums, previous.trials)
        if after < before:
            a, b = start
        if clamped:
            logger.warning("separation in %s: coefficients clamped at +/-%g", label, Config.LOGIT_BOUND)
            flags.append(f"binomial_separation:{label}")
        alpha.append(a)
        beta.append(b)
    return BinomialLogit(alpha=tuple(alpha), beta=tuple(beta), trials=previous.trials), flags


def profile_responsibilities(data: ExperimentData, gamma: np.ndarray) -> np.ndarray:
    """gamma summed over the subjects of each profile"""
    totals = np.zeros((data.n_profiles,) + gamma.shape[1:])
    np.add.at(totals, data.profile_of, gamma)
    return totals


def pq_objective(data: ExperimentData, profile_gamma: np.ndarray, params: MismeasureParams) -> float:
    """Sum of gamma * log tau, the part of the EM objective that depends on (p, q)"""
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(xlogy(profile_gamma, data.tau(params))))


class _PQTransform:
    """Maps (p, q) per stratum to an unbounded vector through a scaled logit"""

    def __init__(self, data: ExperimentData, bounds: Tuple[float, float]):
        self.lo, self.hi = bounds
        self.strata = data.strata if data.stratified else None

    def pack(self, params: MismeasureParams) -> np.ndarray:
        if self.strata is None:
            values = [params.p, params.q]
        else:
            values = [v for label in self.strata for v in params.for_stratum(label)]
        frac = (np.clip(values, self.lo, self.hi) - self.lo) / (self.hi - self.lo)
        return logit(np.clip(frac, 1e-9, 1 - 1e-9))

    def unpack(self, z: np.ndarray) -> MismeasureParams:
        values = self.lo + (self.hi - self.lo) * expit(np.asarray(z, dtype=float))
        if self.strata is None:
            return MismeasureParams(p=float(values[0]), q=float(values[1]))
        per_stratum = {label: (float(values[2 * s]), float(values[2 * s + 1])) for s, label in enumerate(self.strata)}
        first = per_stratum[self.strata[0]]
        return MismeasureParams(p=first[0], q=first[1], per_stratum=per_stratum)


def m_step_pq(
    data: ExperimentData,
    gamma: np.ndarray,
    previous: MismeasureParams,
    bounds: Tuple[float, float] = Config.PQ_BOUNDS,
) -> Tuple[MismeasureParams, List[str]]:
    """Maximize sum gamma log tau over (p, q) by Nelder-Mead on the logit scale within bounds"""
    profile_gamma = profile_responsibilities(data, gamma)
    transform = _PQTransform(data, bounds)

    def negative(z):
        value = pq_objective(data, profile_gamma, transform.unpack(z))
        return -value if np.isfinite(value) else np.inf

    z0 = transform.pack(previous)
    start = transform.unpack(z0)
    f0 = negative(z0)
    result = minimize(
        negative,
        z0,
        method="Nelder-Mead",
        options={
            "xatol": 1e-8,
            "fatol": Config.PQ_OBJECTIVE_TOL * max(1.0, abs(f0) if np.isfinite(f0) else 1.0),
            "maxiter": 400 * len(z0),
            "maxfev": 800 * len(z0),
        },
    )
    if not result.success or not np.isfinite(result.fun):
        logger.warning("(p, q) optimizer did not converge: %s", result.message)
        return start, ["pq_not_converged"]
    if result.fun > f0:
        return start, []
    return transform.unpack(result.x), []


def _trials(data: ExperimentData, config: FitConfig) -> int:
    m = config.trials if config.trials is not None else int(max(1, np.max(data.y)))
    if np.any(data.y < 0) or np.any(data.y > m) or np.any(data.y != np.round(data.y)):
        raise ConfigError(f"binomial outcomes must be integers in [0, {m}]")
    return m


def naive_start(data: ExperimentData, config: FitConfig):
    """Outcome model at the observed (condition, degree) and (p, q) = (0.05, 0.05 * density)"""
    trials = _trials(data, config) if config.family == "binomial" else None
    family = fit_hard_family(data.observed_condition, data.observed_degree, data.y, config.family, trials)
    lo, hi = config.pq_bounds
    p = float(np.clip(START_P, lo, hi))
    q = float(np.clip(START_P * data.observed_density, lo, hi))
    per_stratum = {label: (p, q) for label in data.strata} if data.stratified else None
    return family, MismeasureParams(p=p, q=q, per_stratum=per_stratum)


def _perturbed_start(base_family, data: ExperimentData, config: FitConfig, rng: np.random.Generator):
    lo, hi = config.pq_bounds
    alpha = np.asarray(base_family.alpha) * (1.0 + rng.uniform(-PERTURBATION, PERTURBATION, 4))
    beta = np.asarray(base_family.beta) * (1.0 + rng.uniform(-PERTURBATION, PERTURBATION, 4))
    if isinstance(base_family, GaussianLinear):
        sigma2 = base_family.sigma2 * (1.0 + rng.uniform(-PERTURBATION, PERTURBATION))
        family = GaussianLinear(alpha=tuple(alpha.tolist()), beta=tuple(beta.tolist()), sigma2=sigma2)
    else:
        family = BinomialLogit(alpha=tuple(alpha.tolist()), beta=tuple(beta.tolist()), trials=base_family.trials)
    if data.stratified:
        draws = rng.uniform(lo, hi, size=2 * len(data.strata))
        per_stratum = {label: (float(draws[2 * s]), float(draws[2 * s + 1])) for s, label in enumerate(data.strata)}
        first = per_stratum[data.strata[0]]
        mismeasure = MismeasureParams(p=first[0], q=first[1], per_stratum=per_stratum)
    else:
        p, q = rng.uniform(lo, hi, size=2)
        mismeasure = MismeasureParams(p=float(p), q=float(q))
    return family, mismeasure


def _param_vector(family, mismeasure: MismeasureParams) -> np.ndarray:
    values = list(family.alpha) + list(family.beta)
    if isinstance(family, GaussianLinear):
        values.append(family.sigma2)
    values += [mismeasure.p, mismeasure.q]
    if mismeasure.per_stratum:
        values += [v for key in sorted(mismeasure.per_stratum) for v in mismeasure.per_stratum[key]]
    return np.asarray(values, dtype=float)


def run_chain(data: ExperimentData, config: FitConfig, family, mismeasure: MismeasureParams) -> dict:
    """One EM chain from the given start"""
    tau = data.tau(mismeasure)
    gamma, loglik = e_step(data, family, mismeasure, tau)
    trace = [loglik]
    flags: List[str] = []
    converged = False
    n_iters = 0
    for n_iters in range(1, config.max_iters + 1):
        previous = _param_vector(family, mismeasure)
        if isinstance(family, GaussianLinear):
            family = m_step_gaussian(data, gamma, family)
        else:
            family, step_flags = m_step_binomial(data, gamma, family)
            flags.extend(step_flags)
        mismeasure, step_flags = m_step_pq(data, gamma, mismeasure, config.pq_bounds)
        flags.extend(step_flags)
        tau = data.tau(mismeasure)
        gamma, new_loglik = e_step(data, family, mismeasure, tau)
        trace.append(new_loglik)
        change = abs(new_loglik - loglik) / max(abs(loglik), np.finfo(float).tiny)
        loglik = new_loglik
        params_settled = True
        if config.param_tol is not None:
            current = _param_vector(family, mismeasure)
            rel = np.abs(current - previous) / np.maximum(np.abs(previous), 1e-12)
            params_settled = bool(np.max(rel) < config.param_tol)
        if change < config.rel_tol and params_settled:
            converged = True
            break
    return {
        "family": family,
        "mismeasure": mismeasure,
        "trace": trace,
        "converged": converged,
        "n_iters": n_iters,
        "flags": list(dict.fromkeys(flags)),
        "gamma": gamma,
    }


def fit(data: ExperimentData, config: Optional[FitConfig] = None, initial=None) -> FitResult:
    """Multi-start EM; returns the chain with the highest final log-likelihood.

    Start 0 is `initial` (family, mismeasure) when given, else the naive fit.
    The other starts perturb its outcome parameters by up to 20% and draw
    (p, q) uniformly within the bounds, each from its own spawned seed.
    """
    config = config or FitConfig()
    if config.family == "binomial":
        _trials(data, config)
    base_family, base_mismeasure = initial if initial is not None else naive_start(data, config)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_starts)

    def run_start(index: int):
        try:
            if index == 0:
                family, mismeasure = base_family, base_mismeasure
            else:
                family, mismeasure = _perturbed_start(base_family, data, config, np.random.default_rng(seeds[index]))
            return run_chain(data, config, family, mismeasure), None
        except (SpilloverError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.warning("EM start %d failed: %s", index, exc)
            return None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        outcomes = list(pool.map(run_start, range(config.n_starts)))

    chains = [chain for chain, _ in outcomes]
    if all(chain is None for chain in chains):
        raise FitFailedError([message for _, message in outcomes])
    start_logliks = [chain["trace"][-1] if chain is not None else None for chain in chains]
    best = max(
        (i for i, chain in enumerate(chains) if chain is not None),
        key=lambda i: (start_logliks[i], -i),
    )
    chain = chains[best]
    flags = list(chain["flags"])
    if not chain["converged"]:
        flags.append("not_converged")
        logger.warning("best EM start did not converge within %d iterations", config.max_iters)
    means = estimate_means(data, chain["family"], chain["mismeasure"], exclude_isolated=config.exclude_isolated)
    return FitResult(
        family=chain["family"],
        mismeasure=chain["mismeasure"],
        loglik_trace=chain["trace"],
        mean_outcomes=means,
        contrasts=contrasts(means),
        converged=chain["converged"],
        best_start=best,
        n_iters=chain["n_iters"],
        start_logliks=start_logliks,
        flags=flags,
        priors=data.priors,
        responsibilities=chain["gamma"],
    )


def estimate_means(
    data: ExperimentData, family, params: MismeasureParams, exclude_isolated: bool = False
) -> Dict[str, float]:
    """Plug-in mean outcome per condition.

    Each subject contributes sum_d P(d) E_f[y | c, d], where P(d) is its tau
    posterior over the true degree (summed over conditions). With
    exclude_isolated the degree posterior is conditioned on d >= 1 and
    subjects are weighted by P(d >= 1).
    """
    degree_post = data.tau(params).sum(axis=1)[data.profile_of]
    expected = family_mean(family, data.degrees)
    if exclude_isolated:
        mass = degree_post[:, 1:].sum()
        if mass <= 0.0:
            return {label: 0.0 for label in CONDITION_LABELS}
        totals = degree_post[:, 1:].sum(axis=0) @ expected[:, 1:].T
        return {label: float(totals[c] / mass) for c, label in enumerate(CONDITION_LABELS)}
    averages = degree_post.mean(axis=0) @ expected.T
    return {label: float(averages[c]) for c, label in enumerate(CONDITION_LABELS)}


def contrasts(means: Union[Dict[str, float], Sequence[float]]) -> Dict[str, float]:
    """direct = D - 0, network_intensive = I - 0, interaction = 0 + F - I - D"""
    if isinstance(means, dict):
        none, indirect, direct, full = (means[label] for label in CONDITION_LABELS)
    else:
        none, indirect, direct, full = means
    return {
        "direct": direct - none,
        "network_intensive": indirect - none,
        "interaction": none + full - indirect - direct,
    }
