"""Exposure conditions, Bernoulli-design exposure probabilities and the Horvitz-Thompson estimators."""

import logging
from itertools import product
from typing import Literal, Optional

import numpy as np

from config import Config
from estimation.mixture import family_mean
from estimation.regression import weighted_linear, weighted_logit
from models.data_models import (
    CONDITION_LABELS,
    BinomialLogit,
    DirectedGraph,
    ExperimentDesign,
    GaussianLinear,
    HTResult,
    OracleResult,
)
from models.errors import ConfigError, EmptyConditionError, ZeroProbabilityError
from network.graph import in_adjacency, in_degrees, treated_in_degrees

logger = logging.getLogger(__name__)


def classify(t, g: DirectedGraph) -> np.ndarray:
    """Exposure condition index per node: 2 * t_i + (any treated in-neighbour)"""
    t = np.asarray(t, dtype=np.int64)
    exposed = treated_in_degrees(g, t) > 0
    return 2 * t + exposed.astype(np.int64)


def exposure_probabilities(assign_prob: float, degree) -> np.ndarray:
    """P(C = c) for each condition under independent Bernoulli(assign_prob) assignment; last axis is c"""
    if not 0.0 < assign_prob < 1.0:
        raise ConfigError(f"assignment probability must lie in (0, 1), got {assign_prob}")
    degree = np.asarray(degree)
    if np.any(degree < 0):
        raise ValueError("degree must be nonnegative")
    none_treated = (1.0 - assign_prob) ** degree
    return np.stack(
        [
            (1.0 - assign_prob) * none_treated,
            (1.0 - assign_prob) * (1.0 - none_treated),
            assign_prob * none_treated,
            assign_prob * (1.0 - none_treated),
        ],
        axis=-1,
    )


def ht_estimate(design: ExperimentDesign, g: DirectedGraph, strict: bool = True) -> HTResult:
    """Horvitz-Thompson mean outcome per exposure condition on the given network.

    Only subjects with positive in-degree can reach every condition, so the
    others are excluded and reported. In strict mode a condition nobody
    landed in raises; otherwise its mean is the empty sum, 0.
    """
    if design.n_nodes != g.n_nodes:
        raise ValueError(f"design has {design.n_nodes} subjects, network has {g.n_nodes} nodes")
    y = design.y()
    conditions = classify(design.treatment, g)
    degree = in_degrees(g)
    probabilities = exposure_probabilities(design.assign_prob, degree)

    included = np.flatnonzero(degree > 0)
    excluded = np.flatnonzero(degree == 0)
    observed_prob = probabilities[included, conditions[included]]
    if np.any(observed_prob <= 0.0):
        bad = int(included[np.argmax(observed_prob <= 0.0)])
        raise ZeroProbabilityError(f"subject {bad} observed in a condition with probability 0")

    empty = [CONDITION_LABELS[c] for c in range(4) if not np.any(conditions[included] == c)]
    if empty and strict:
        raise EmptyConditionError(empty)
    if empty:
        logger.warning("no included subjects in %s; reporting 0", ", ".join(empty))

    means = {}
    for c, label in enumerate(CONDITION_LABELS):
        members = included[conditions[included] == c]
        total = float(np.sum(y[members] / probabilities[members, c]))
        means[label] = total / len(included) if len(included) else 0.0

    return HTResult(
        means=means,
        n_included=len(included),
        included=included.tolist(),
        excluded=excluded.tolist(),
        conditions=[CONDITION_LABELS[c] for c in conditions],
        probabilities=probabilities.tolist(),
        empty_conditions=empty,
    )


def fit_naive_family(
    design: ExperimentDesign,
    g: DirectedGraph,
    kind: Literal["gaussian", "binomial"] = "gaussian",
    trials: Optional[int] = None,
):
    """Outcome model fitted at the observed (condition, degree), as if the network were exact"""
    conditions = classify(design.treatment, g)
    degree = in_degrees(g)
    return fit_hard_family(conditions, degree, design.y(), kind, trials)


def fit_hard_family(conditions, degree, y, kind="gaussian", trials=None):
    """Per-condition regressions with each subject fixed at one (condition, degree)"""
    conditions = np.asarray(conditions, dtype=np.int64)
    degree = np.asarray(degree, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    grid = np.arange(int(degree.max(initial=0)) + 1)
    alpha, beta = [], []
    if kind == "binomial":
        m = int(trials) if trials is not None else int(max(1, np.max(y, initial=1)))
    for c in range(4):
        members = conditions == c
        weight = np.bincount(degree[members], minlength=len(grid)).astype(float)
        sums = np.bincount(degree[members], weights=y[members], minlength=len(grid))
        if kind == "binomial":
            a, b, _ = weighted_logit(grid, weight, sums, m)
        else:
            a, b, _ = weighted_linear(grid, weight, sums, previous=(float(y.mean()) if y.size else 0.0, 0.0))
        alpha.append(a)
        beta.append(b)
    if kind == "binomial":
        return BinomialLogit(alpha=tuple(alpha), beta=tuple(beta), trials=m)
    fitted = np.asarray(alpha)[conditions] + np.asarray(beta)[conditions] * degree
    sigma2 = max(float(np.mean((y - fitted) ** 2)) if y.size else 1.0, Config.MIN_VARIANCE)
    return GaussianLinear(alpha=tuple(alpha), beta=tuple(beta), sigma2=sigma2)


def regression_estimate(design: ExperimentDesign, g: DirectedGraph, family, exclude_isolated: bool = False) -> dict:
    """Model-based mean outcome per condition: average of E[y | c, d_i] over subjects.

    For the Gaussian family this is alpha_c + beta_c * mean in-degree.
    """
    degree = in_degrees(g)
    if exclude_isolated:
        degree = degree[degree > 0]
    if degree.size == 0:
        return {label: 0.0 for label in CONDITION_LABELS}
    expected = family_mean(family, degree)
    return {label: float(np.mean(expected[c])) for c, label in enumerate(CONDITION_LABELS)}


def _ht_batch(true_exposed, observed_exposed, t, potential, observed_prob, included):
    """HT estimates for a batch of assignments, shape (assignments, 4)"""
    true_condition = 2 * t + true_exposed
    observed_condition = 2 * t + observed_exposed
    realized = np.take_along_axis(potential[None, :, :], true_condition[:, :, None], axis=2)[:, :, 0]
    weight = np.where(included[None, :], realized, 0.0)
    estimates = np.zeros((t.shape[0], 4))
    n_included = int(included.sum())
    if n_included == 0:
        return estimates
    for c in range(4):
        hits = observed_condition == c
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(hits & included[None, :], weight / observed_prob[None, :, c], 0.0)
        estimates[:, c] = terms.sum(axis=1) / n_included
    return estimates


def ht_bias_oracle(
    true_g: DirectedGraph,
    observed_g: DirectedGraph,
    potential_outcomes,
    assign_prob: float,
    n_assignments: int = 100_000,
    seed=None,
) -> OracleResult:
    """Expected HT estimate on observed_g when outcomes follow true_g, over random assignments.

    potential_outcomes[i, c] is subject i's outcome under condition c. For at
    most ORACLE_ENUMERATION_LIMIT nodes every assignment is enumerated;
    otherwise n_assignments seeded draws are averaged. Inclusion and
    denominators use the observed degree, as the estimator would.
    """
    potential = np.asarray(potential_outcomes, dtype=float)
    n = true_g.n_nodes
    if observed_g.n_nodes != n or potential.shape != (n, 4):
        raise ValueError(f"expected two {n}-node graphs and a ({n}, 4) potential-outcome table")
    if not 0.0 < assign_prob < 1.0:
        raise ConfigError(f"assignment probability must lie in (0, 1), got {assign_prob}")

    true_adj = in_adjacency(true_g)
    observed_adj = in_adjacency(observed_g)
    observed_degree = in_degrees(observed_g)
    included = observed_degree > 0
    observed_prob = exposure_probabilities(assign_prob, observed_degree)

    def estimate(t: np.ndarray) -> np.ndarray:
        true_exposed = (true_adj @ t.T).T > 0
        observed_exposed = (observed_adj @ t.T).T > 0
        return _ht_batch(true_exposed.astype(np.int64), observed_exposed.astype(np.int64), t, potential, observed_prob, included)

    if n <= Config.ORACLE_ENUMERATION_LIMIT:
        t = np.array(list(product((0, 1), repeat=n)), dtype=np.int64)
        n_treated = t.sum(axis=1)
        weights = assign_prob**n_treated * (1.0 - assign_prob) ** (n - n_treated)
        expected = weights @ estimate(t)
        method, draws, errors = "enumeration", len(t), None
    else:
        rng = np.random.default_rng(seed)
        batch = 10_000
        total = np.zeros(4)
        total_sq = np.zeros(4)
        done = 0
        while done < n_assignments:
            size = min(batch, n_assignments - done)
            t = (rng.random((size, n)) < assign_prob).astype(np.int64)
            values = estimate(t)
            total += values.sum(axis=0)
            total_sq += (values**2).sum(axis=0)
            done += size
        expected = total / done
        spread = np.maximum(total_sq / done - expected**2, 0.0) * done / max(done - 1, 1)
        errors = {label: float(np.sqrt(spread[c] / done)) for c, label in enumerate(CONDITION_LABELS)}
        method, draws = "monte_carlo", done

    truly_included = in_degrees(true_g) > 0
    if truly_included.any():
        true_means = potential[truly_included].mean(axis=0)
    else:
        true_means = np.zeros(4)
    logger.info("bias oracle: %s over %d assignments", method, draws)
    return OracleResult(
        method=method,
        n_assignments=draws,
        expected={label: float(expected[c]) for c, label in enumerate(CONDITION_LABELS)},
        true_means={label: float(true_means[c]) for c, label in enumerate(CONDITION_LABELS)},
        bias={label: float(expected[c] - true_means[c]) for c, label in enumerate(CONDITION_LABELS)},
        standard_errors=errors,
    )
