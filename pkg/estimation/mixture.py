"""Latent exposure posterior tau, outcome families and the observed-data log-likelihood.

Each subject's true (exposure condition, in-degree) is latent. Given the
observed network and the treatment vector, the count of true treated
influencers and the count of true untreated influencers have independent
posteriors (one per edge stratum when stratified), and tau combines them.
Subjects that share a profile (network, own treatment, observed counts and
candidate pool sizes) share a tau row, so tau is stored per profile.
"""

import copy
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp, xlog1py, xlogy
from scipy.stats import norm

from config import Config
from estimation.degree_prior import build_prior, logpmf_table, truncated_support
from models.data_models import (
    STRATUM_ALL,
    STRATUM_BETWEEN,
    STRATUM_WITHIN,
    BetaBinomialPrior,
    BinomialLogit,
    DirectedGraph,
    ExperimentDesign,
    GaussianLinear,
    MismeasureParams,
    PriorConfig,
)
from models.errors import ConfigError, LikelihoodUnderflowError
from network.graph import in_degrees, treated_in_degrees

logger = logging.getLogger(__name__)

N_CONDITIONS = 4
STRATIFIED_LABELS = (STRATUM_WITHIN, STRATUM_BETWEEN)

# Upper bound on floats held by one (profiles x degrees x dropped-edges) block
_BLOCK_FLOATS = 4_000_000


def _log_binom_pmf(k, n, prob: float) -> np.ndarray:
    """log Bin(k; n, prob), -inf off the support (including n < 0)"""
    k, n = np.broadcast_arrays(np.asarray(k, dtype=float), np.asarray(n, dtype=float))
    valid = (k >= 0) & (n >= 0) & (k <= n)
    ks = np.where(valid, k, 0.0)
    ns = np.where(valid, n, 0.0)
    out = gammaln(ns + 1) - gammaln(ks + 1) - gammaln(ns - ks + 1) + xlogy(ks, prob) + xlog1py(ns - ks, -prob)
    return np.where(valid, out, -np.inf)


def count_log_likelihood(observed: np.ndarray, pool: np.ndarray, n_support: int, p: float, q: float) -> np.ndarray:
    """log P(observed count | true count d) for d = 0..n_support-1, one row per (observed, pool).

    A true count d yields r retained edges, r ~ Bin(d, 1-p), plus observed - r
    false edges out of the pool - d non-edges, each added with probability q.
    """
    observed = np.asarray(observed, dtype=np.int64)
    pool = np.asarray(pool, dtype=np.int64)
    retained = np.arange(int(observed.max(initial=0)) + 1)[None, None, :]
    true_count = np.arange(n_support)[None, :, None]
    log_kept = _log_binom_pmf(retained, true_count, 1.0 - p)
    log_false = _log_binom_pmf(observed[:, None, None] - retained, pool[:, None, None] - true_count, q)
    with np.errstate(divide="ignore"):
        return logsumexp(log_kept + log_false, axis=2)


def count_posterior_batch(
    observed: np.ndarray, pool: np.ndarray, log_prior: np.ndarray, p: float, q: float
) -> np.ndarray:
    """Normalized posteriors over the true count; log_prior is (rows, support) with -inf padding.

    Rows whose observation is impossible under every supported count come back all zero.
    """
    n_rows, n_support = log_prior.shape
    out = np.zeros((n_rows, n_support))
    if n_rows == 0:
        return out
    width = n_support * (int(np.max(observed, initial=0)) + 1)
    block = max(1, _BLOCK_FLOATS // max(width, 1))
    for start in range(0, n_rows, block):
        rows = slice(start, start + block)
        log_post = count_log_likelihood(observed[rows], pool[rows], n_support, p, q) + log_prior[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            norm_const = logsumexp(log_post, axis=1, keepdims=True)
            post = np.exp(log_post - norm_const)
        out[rows] = np.where(np.isfinite(norm_const), post, 0.0)
    return out


def _support(prior: BetaBinomialPrior, pool: int, observed: int, tail_mass: Optional[float]) -> int:
    resized = prior.resized(pool)
    return min(pool, max(truncated_support(resized, tail_mass), observed))


def count_posterior(
    observed: int, pool: int, p: float, q: float, prior: BetaBinomialPrior, tail_mass: Optional[float] = None
) -> np.ndarray:
    """Posterior over the true number of connections among `pool` candidates given `observed`"""
    if not 0 <= observed <= pool:
        raise ValueError(f"observed count {observed} outside [0, {pool}]")
    support = _support(prior, pool, observed, tail_mass)
    log_prior = np.asarray(logpmf_table(prior.resized(pool))[: support + 1])
    return count_posterior_batch(np.array([observed]), np.array([pool]), log_prior[None, :], p, q)[0]


def _pools(t: np.ndarray, i: int) -> Tuple[int, int]:
    n_treated = int(t.sum()) - int(t[i])
    return n_treated, len(t) - 1 - n_treated


def treated_count_posterior(
    i: int, t, observed_treated: int, params: MismeasureParams, prior: BetaBinomialPrior, tail_mass=None
) -> np.ndarray:
    """Posterior over subject i's true number of treated influencers"""
    t = np.asarray(t, dtype=np.int64)
    pool, _ = _pools(t, i)
    return count_posterior(observed_treated, pool, params.p, params.q, prior, tail_mass)


def untreated_count_posterior(
    i: int, t, observed_untreated: int, params: MismeasureParams, prior: BetaBinomialPrior, tail_mass=None
) -> np.ndarray:
    """Posterior over subject i's true number of untreated influencers"""
    t = np.asarray(t, dtype=np.int64)
    _, pool = _pools(t, i)
    return count_posterior(observed_untreated, pool, params.p, params.q, prior, tail_mass)


def _convolve_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1))
    for k in range(a.shape[1]):
        out[:, k : k + b.shape[1]] += a[:, k : k + 1] * b
    return out


def _fit_width(rows: np.ndarray, width: int) -> np.ndarray:
    if rows.shape[1] >= width:
        return rows[:, :width]
    return np.pad(rows, ((0, 0), (0, width - rows.shape[1])))


def combine_counts(treated: np.ndarray, untreated: np.ndarray, own_treatment: np.ndarray, n_degrees: int) -> np.ndarray:
    """tau rows (rows, 4, n_degrees) from treated / untreated count posteriors.

    No treated influencer: tau(k0, d) = P(d_t = 0) P(d_nt = d). At least one:
    tau(k1, d) = sum over d_t >= 1 of P(d_t) P(d_nt = d - d_t). k is the
    subject's own treatment, which is never latent.
    """
    n_rows = treated.shape[0]
    unexposed = _fit_width(treated[:, :1] * untreated, n_degrees)
    some_treated = treated.copy()
    some_treated[:, 0] = 0.0
    exposed = _fit_width(_convolve_rows(some_treated, untreated), n_degrees)
    tau = np.zeros((n_rows, N_CONDITIONS, n_degrees))
    rows = np.arange(n_rows)
    own = np.asarray(own_treatment, dtype=np.int64)
    tau[rows, 2 * own] = unexposed
    tau[rows, 2 * own + 1] = exposed
    total = tau.sum(axis=(1, 2), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, tau / total, 0.0)


def subject_tau(
    i: int,
    t,
    observed: DirectedGraph,
    params: MismeasureParams,
    prior: BetaBinomialPrior,
    tail_mass: Optional[float] = None,
) -> np.ndarray:
    """tau row (4, d_max + 1) for one subject of an unstratified network"""
    t = np.asarray(t, dtype=np.int64)
    if len(t) != observed.n_nodes:
        raise ValueError(f"treatment vector has length {len(t)}, graph has {observed.n_nodes} nodes")
    seen_treated = int(sum(t[j] for j in observed.in_neighbors[i]))
    seen_untreated = len(observed.in_neighbors[i]) - seen_treated
    treated = treated_count_posterior(i, t, seen_treated, params, prior, tail_mass)
    untreated = untreated_count_posterior(i, t, seen_untreated, params, prior, tail_mass)
    n_degrees = len(treated) + len(untreated) - 1
    return combine_counts(treated[None, :], untreated[None, :], np.array([t[i]]), n_degrees)[0]


# Outcome families


def family_log_density(family, y: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """log f(y_s; theta_c, d) as an array (subjects, 4, degrees)"""
    y = np.asarray(y, dtype=float)[:, None, None]
    alpha = np.asarray(family.alpha)[None, :, None]
    beta = np.asarray(family.beta)[None, :, None]
    eta = alpha + beta * np.asarray(degrees, dtype=float)[None, None, :]
    if isinstance(family, GaussianLinear):
        return norm.logpdf(y, loc=eta, scale=np.sqrt(family.sigma2))
    m = family.trials
    inside = (y >= 0) & (y <= m) & (y == np.round(y))
    ys = np.where(inside, y, 0.0)
    log_comb = gammaln(m + 1) - gammaln(ys + 1) - gammaln(m - ys + 1)
    out = log_comb + ys * log_expit(eta) + (m - ys) * log_expit(-eta)
    return np.where(inside, out, -np.inf)


def family_density(family, y: float, condition: int, degree: int) -> float:
    """Density (Gaussian) or mass (binomial) of one outcome at (condition, degree)"""
    log_f = family_log_density(family, np.array([y]), np.array([degree]))
    return float(np.exp(log_f[0, int(condition), 0]))


def family_mean(family, degrees: np.ndarray) -> np.ndarray:
    """E[y | c, d] as an array (4, degrees)"""
    eta = np.asarray(family.alpha)[:, None] + np.asarray(family.beta)[:, None] * np.asarray(degrees, dtype=float)[None, :]
    if isinstance(family, BinomialLogit):
        return family.trials * expit(eta)
    return eta


class ExperimentData:
    """Subjects of one or more experiments, pooled for estimation.

    Per subject: outcome, own treatment, network index and, per stratum, the
    observed treated / untreated influencer counts with their candidate pool
    sizes. Priors are built per network (and stratum) from PriorConfig
    unless given explicitly.
    """

    def __init__(
        self,
        experiments: Sequence[Tuple[ExperimentDesign, DirectedGraph]],
        prior_config: Optional[PriorConfig] = None,
        stratified: bool = False,
        tail_mass: Optional[float] = Config.PRIOR_TAIL_MASS,
        priors: Optional[Sequence[Dict[str, BetaBinomialPrior]]] = None,
    ):
        if not experiments:
            raise ConfigError("no experiments supplied")
        prior_config = prior_config or PriorConfig()
        self.stratified = stratified
        self.strata: Tuple[str, ...] = STRATIFIED_LABELS if stratified else (STRATUM_ALL,)
        self.tail_mass = tail_mass
        self.n_networks = len(experiments)

        outcomes, treatment, network = [], [], []
        obs_t, obs_nt, pool_t, pool_nt = [], [], [], []
        self.priors: List[Dict[str, BetaBinomialPrior]] = []
        densities = []
        for k, (design, graph) in enumerate(experiments):
            if design.n_nodes != graph.n_nodes:
                raise ConfigError(
                    f"experiment {k}: design has {design.n_nodes} subjects, network has {graph.n_nodes} nodes"
                )
            t = design.t()
            counts = self._stratum_counts(graph, t) if stratified else self._plain_counts(graph, t)
            n = graph.n_nodes
            densities.append(graph.n_edges / (n * (n - 1)) if n > 1 else 0.0)
            if priors is not None:
                network_priors = dict(priors[k])
            else:
                network_priors = {}
                for s, label in enumerate(self.strata):
                    seen = counts[0][:, s] + counts[1][:, s]
                    pool = counts[2][:, s] + counts[3][:, s]
                    size = n - 1 if not stratified else int(round(float(pool.mean())))
                    network_priors[label] = build_prior(prior_config.for_stratum(label), seen, size)
            missing = [label for label in self.strata if label not in network_priors]
            if missing:
                raise ConfigError(f"experiment {k}: no prior for strata {missing}")
            self.priors.append(network_priors)
            outcomes.append(design.y())
            treatment.append(t)
            network.append(np.full(n, k, dtype=np.int64))
            for store, values in zip((obs_t, obs_nt, pool_t, pool_nt), counts):
                store.append(values)

        self.y = np.concatenate(outcomes)
        self.treatment = np.concatenate(treatment)
        self.network = np.concatenate(network)
        self.observed_treated = np.concatenate(obs_t)
        self.observed_untreated = np.concatenate(obs_nt)
        self.pool_treated = np.concatenate(pool_t)
        self.pool_untreated = np.concatenate(pool_nt)
        self.observed_density = float(np.mean(densities))
        self.observed_degree = (self.observed_treated + self.observed_untreated).sum(axis=1)
        self.observed_condition = 2 * self.treatment + (self.observed_treated.sum(axis=1) > 0)
        self._build_profiles()

    @property
    def n_subjects(self) -> int:
        return len(self.y)

    @property
    def n_profiles(self) -> int:
        return len(self.profile_subject)

    @property
    def degrees(self) -> np.ndarray:
        return np.arange(self.n_degrees)

    @staticmethod
    def _plain_counts(graph: DirectedGraph, t: np.ndarray):
        seen = in_degrees(graph)
        seen_treated = treated_in_degrees(graph, t)
        n_treated = int(t.sum())
        pool_treated = n_treated - t
        pool_untreated = graph.n_nodes - 1 - n_treated + t
        return tuple(
            np.asarray(v, dtype=np.int64)[:, None]
            for v in (seen_treated, seen - seen_treated, pool_treated, pool_untreated)
        )

    @staticmethod
    def _stratum_counts(graph: DirectedGraph, t: np.ndarray):
        if graph.node_group is None:
            raise ConfigError(
                "the stratified model needs node groups (a `group` design column) on every observed network;"
                " edge labels alone do not give the stratum of absent pairs"
            )
        n = graph.n_nodes
        _, codes = np.unique(np.asarray(graph.node_group), return_inverse=True)
        codes = codes.reshape(-1)
        group_size = np.bincount(codes)
        group_treated = np.bincount(codes, weights=t).astype(np.int64)
        n_treated = int(t.sum())

        seen_treated = np.zeros((n, 2), dtype=np.int64)
        seen_untreated = np.zeros((n, 2), dtype=np.int64)
        for i, row in enumerate(graph.in_neighbors):
            for j in row:
                s = 0 if codes[j] == codes[i] else 1
                if t[j]:
                    seen_treated[i, s] += 1
                else:
                    seen_untreated[i, s] += 1

        within_treated = group_treated[codes] - t
        within_untreated = group_size[codes] - group_treated[codes] - (1 - t)
        between_treated = n_treated - group_treated[codes]
        between_untreated = (n - group_size[codes]) - between_treated
        pool_treated = np.stack([within_treated, between_treated], axis=1)
        pool_untreated = np.stack([within_untreated, between_untreated], axis=1)
        return seen_treated, seen_untreated, pool_treated, pool_untreated

    def _build_profiles(self):
        keys = np.column_stack(
            [
                self.network,
                self.treatment,
                self.observed_treated,
                self.observed_untreated,
                self.pool_treated,
                self.pool_untreated,
            ]
        ).astype(np.int64)
        _, first, inverse, counts = np.unique(keys, axis=0, return_index=True, return_inverse=True, return_counts=True)
        self.profile_of = inverse.reshape(-1)
        self.profile_subject = first
        self.profile_size = counts
        self.profile_treatment = self.treatment[first]

        # Per stratum and class: supports and -inf padded log priors, fixed for all (p, q)
        support_cache: Dict[Tuple[float, float, int, int], int] = {}
        self._count_tables = []
        total_support = np.zeros(len(first), dtype=np.int64)
        for s, label in enumerate(self.strata):
            for seen, pools in (
                (self.observed_treated[first, s], self.pool_treated[first, s]),
                (self.observed_untreated[first, s], self.pool_untreated[first, s]),
            ):
                supports = np.empty(len(first), dtype=np.int64)
                for j, (obs, pool, net) in enumerate(zip(seen, pools, self.network[first])):
                    prior = self.priors[net][label]
                    key = (prior.mu, prior.rho, int(pool), int(obs))
                    if key not in support_cache:
                        support_cache[key] = _support(prior, int(pool), int(obs), self.tail_mass)
                    supports[j] = support_cache[key]
                log_prior = np.full((len(first), int(supports.max(initial=0)) + 1), -np.inf)
                for j, (pool, net) in enumerate(zip(pools, self.network[first])):
                    table = logpmf_table(self.priors[net][label].resized(int(pool)))
                    log_prior[j, : supports[j] + 1] = table[: supports[j] + 1]
                self._count_tables.append((label, seen.astype(np.int64), pools.astype(np.int64), log_prior))
                total_support += supports
        self.n_degrees = int(total_support.max(initial=0)) + 1

    def _stratum_params(self, params: MismeasureParams, label: str) -> Tuple[float, float]:
        if label == STRATUM_ALL or params.per_stratum is None:
            return params.p, params.q
        if label not in params.per_stratum:
            raise ConfigError(f"no mismeasurement parameters for stratum '{label}'")
        return params.per_stratum[label]

    def tau(self, params: MismeasureParams) -> np.ndarray:
        """Posterior table per profile, shape (profiles, 4, n_degrees)"""
        treated, untreated = None, None
        for index, (label, seen, pools, log_prior) in enumerate(self._count_tables):
            p, q = self._stratum_params(params, label)
            post = count_posterior_batch(seen, pools, log_prior, p, q)
            if index % 2 == 0:
                treated = post if treated is None else _convolve_rows(treated, post)
            else:
                untreated = post if untreated is None else _convolve_rows(untreated, post)
        return combine_counts(treated, untreated, self.profile_treatment, self.n_degrees)

    def subject_tau(self, params: MismeasureParams) -> np.ndarray:
        return self.tau(params)[self.profile_of]

    def with_outcomes(self, y: np.ndarray) -> "ExperimentData":
        """Same subjects and networks with replaced outcomes"""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError(f"expected {self.y.shape[0]} outcomes, got {y.shape[0]}")
        clone = copy.copy(self)
        clone.y = y
        return clone


def joint_log_terms(data: ExperimentData, family, tau: np.ndarray) -> np.ndarray:
    """log tau + log f per (subject, condition, degree)"""
    with np.errstate(divide="ignore"):
        log_tau = np.log(tau[data.profile_of])
    return log_tau + family_log_density(family, data.y, data.degrees)


def subject_log_likelihood(data: ExperimentData, family, params: MismeasureParams, tau=None) -> np.ndarray:
    """Per-subject log mixture mass; raises when a subject's mass underflows"""
    tau = data.tau(params) if tau is None else tau
    terms = joint_log_terms(data, family, tau)
    with np.errstate(divide="ignore"):
        per_subject = logsumexp(terms.reshape(data.n_subjects, -1), axis=1)
    bad = np.flatnonzero(~np.isfinite(per_subject))
    if bad.size:
        raise LikelihoodUnderflowError(int(bad[0]), f"y={data.y[bad[0]]:g}, observed degree {data.observed_degree[bad[0]]}")
    return per_subject


def log_likelihood(data: ExperimentData, family, params: MismeasureParams, tau=None) -> float:
    """Observed-data log-likelihood sum_i log sum_{c,d} tau_i(c, d) f(y_i; theta_c, d)"""
    return float(np.sum(subject_log_likelihood(data, family, params, tau)))
