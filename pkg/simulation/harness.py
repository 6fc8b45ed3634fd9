"""Simulation study: generate networks and experiments, corrupt the networks over a (p, q)
grid, estimate condition means by each method and summarize the deviations from truth."""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from estimation.em_engine import fit
from estimation.exposure import classify, fit_naive_family, ht_estimate, regression_estimate
from estimation.mixture import ExperimentData, family_mean
from models.data_models import (
    CONDITION_LABELS,
    BetaBinomialPrior,
    CorruptionSpec,
    DirectedGraph,
    ExperimentDesign,
    GaussianLinear,
    PriorConfig,
    SimProtocol,
)
from models.errors import SpilloverError
from network.generators import generate_er, generate_heterogeneous
from network.graph import corrupt, density, in_degrees
from utils.file_processor import FileProcessor

logger = logging.getLogger(__name__)

STATS = ("mean_dev", "q10", "q90")

# Stream tags keep the seeds of different random draws apart
_NETWORK, _DESIGN, _CORRUPTION, _FIT = 0, 1, 2, 3


class SimulationResult:
    """Grid summary, raw per-record deviations and logged failures of one protocol run"""
    def __init__(self, grid: pd.DataFrame, records: pd.DataFrame, failures: pd.DataFrame):
        self.grid = grid
        self.records = records
        self.failures = failures


def true_means_oracle(network: DirectedGraph, truth, assign_prob: Optional[float] = None) -> Dict[str, float]:
    """Population mean outcome per condition over subjects with positive true in-degree.

    Potential outcomes do not depend on the assignment, so assign_prob is
    accepted for symmetry with the estimators and unused.
    """
    degree = in_degrees(network)
    degree = degree[degree > 0]
    if degree.size == 0:
        return {label: 0.0 for label in CONDITION_LABELS}
    expected = family_mean(truth, degree)
    return {label: float(expected[c].mean()) for c, label in enumerate(CONDITION_LABELS)}


def simulate_outcomes(network: DirectedGraph, t: np.ndarray, truth, rng: np.random.Generator) -> np.ndarray:
    """Outcomes from the generating family at each subject's true (condition, degree)"""
    condition = classify(t, network)
    degree = in_degrees(network)
    eta = np.asarray(truth.alpha)[condition] + np.asarray(truth.beta)[condition] * degree
    if isinstance(truth, GaussianLinear):
        return rng.normal(eta, np.sqrt(truth.sigma2))
    return rng.binomial(truth.trials, expit(eta)).astype(float)


def load_networks(protocol: SimProtocol) -> List[DirectedGraph]:
    """Networks named in the protocol, or generated from its seed"""
    if protocol.edge_lists:
        processor = FileProcessor()
        return [processor.read_edge_list(path) for path in protocol.edge_lists]
    networks = []
    for k in range(protocol.n_networks):
        seed = [protocol.seed, _NETWORK, k]
        if protocol.generator == "er":
            networks.append(generate_er(protocol.n_nodes, protocol.mu, seed))
        else:
            prior = BetaBinomialPrior(mu=protocol.mu, rho=protocol.rho, size=protocol.n_nodes - 1)
            networks.append(generate_heterogeneous(protocol.n_nodes, prior, seed))
    return networks


class _ReplicateRunner:
    """Runs every (p, q) cell and method for one (network, replicate) pair"""

    def __init__(self, protocol: SimProtocol, networks: List[DirectedGraph]):
        self.protocol = protocol
        self.networks = networks
        self.cells = [(p, q) for p in protocol.p_grid for q in protocol.q_grid]

    def _prior_config(self, network: DirectedGraph) -> PriorConfig:
        if self.protocol.prior_mode == "density":
            return PriorConfig(mode="density", mu=density(network))
        return PriorConfig(mode="empirical")

    def _estimate(self, method: str, design: ExperimentDesign, observed: DirectedGraph, truth_graph, fit_seed):
        if method == "ht":
            return ht_estimate(design, observed).means
        if method == "naive":
            kind = self.protocol.fit.family
            family = fit_naive_family(design, observed, kind, self.protocol.fit.trials)
            return regression_estimate(design, observed, family, exclude_isolated=True)
        data = ExperimentData(
            [(design, observed)],
            prior_config=self._prior_config(truth_graph),
            tail_mass=self.protocol.fit.tail_mass,
        )
        config = self.protocol.fit.model_copy(update={"seed": fit_seed, "threads": 1})
        return fit(data, config).mean_outcomes

    def __call__(self, job):
        k, rep = job
        protocol = self.protocol
        network = self.networks[k]
        rng = np.random.default_rng([protocol.seed, _DESIGN, k, rep])
        t = (rng.random(network.n_nodes) < protocol.assign_prob).astype(np.int64)
        y = simulate_outcomes(network, t, protocol.truth, rng)
        design = ExperimentDesign(treatment=t.tolist(), assign_prob=protocol.assign_prob, outcomes=y.tolist())
        truth = true_means_oracle(network, protocol.truth, protocol.assign_prob)

        records, failures = [], []
        for cell, (p, q) in enumerate(self.cells):
            spec = CorruptionSpec(p=p, q=q, q_mode=protocol.q_mode)
            observed = corrupt(network, spec, seed=[protocol.seed, _CORRUPTION, k, rep, cell])
            fit_seed = int(np.random.SeedSequence([protocol.seed, _FIT, k, rep, cell]).generate_state(1)[0])
            for method in protocol.methods:
                try:
                    means = self._estimate(method, design, observed, network, fit_seed)
                except (SpilloverError, ValueError) as exc:
                    logger.warning("network %d rep %d cell (%g, %g) %s failed: %s", k, rep, p, q, method, exc)
                    failures.append({"network": k, "rep": rep, "p": p, "q": q, "method": method, "error": str(exc)})
                    continue
                for label in CONDITION_LABELS:
                    records.append(
                        {
                            "network": k,
                            "rep": rep,
                            "p": p,
                            "q": q,
                            "method": method,
                            "condition": label,
                            "estimate": means[label],
                            "truth": truth[label],
                            "deviation": means[label] - truth[label],
                        }
                    )
        return records, failures


def summarize(records: pd.DataFrame, methods: List[str]) -> pd.DataFrame:
    """Long-format grid p,q,method,condition,stat,value.

    Deviations are averaged per network first, then the mean and the 0.1 /
    0.9 quantiles are taken across networks.
    """
    columns = ["p", "q", "method", "condition", "stat", "value"]
    if records.empty:
        return pd.DataFrame(columns=columns)
    per_network = records.groupby(["p", "q", "method", "condition", "network"], sort=False)["deviation"].mean()
    grouped = per_network.groupby(level=["p", "q", "method", "condition"], sort=False)
    summary = pd.DataFrame(
        {
            "mean_dev": grouped.mean(),
            "q10": grouped.quantile(0.1),
            "q90": grouped.quantile(0.9),
        }
    ).reset_index()
    summary["method"] = pd.Categorical(summary["method"], categories=methods, ordered=True)
    summary["condition"] = pd.Categorical(summary["condition"], categories=list(CONDITION_LABELS), ordered=True)
    summary = summary.sort_values(["p", "q", "method", "condition"], kind="stable")
    long = summary.melt(id_vars=["p", "q", "method", "condition"], value_vars=list(STATS), var_name="stat")
    long["stat"] = pd.Categorical(long["stat"], categories=list(STATS), ordered=True)
    long = long.sort_values(["p", "q", "method", "condition", "stat"], kind="stable").reset_index(drop=True)
    long["method"] = long["method"].astype(str)
    long["condition"] = long["condition"].astype(str)
    long["stat"] = long["stat"].astype(str)
    return long[columns]


def run_protocol(protocol: SimProtocol, threads: int = 1) -> SimulationResult:
    """Run the full simulation grid; results depend only on the protocol, not on threads"""
    networks = load_networks(protocol)
    runner = _ReplicateRunner(protocol, networks)
    jobs = [(k, rep) for k in range(len(networks)) for rep in range(protocol.n_reps)]
    logger.info(
        "simulating %d networks x %d reps x %d cells x %d methods",
        len(networks),
        protocol.n_reps,
        len(runner.cells),
        len(protocol.methods),
    )
    with ThreadPoolExecutor(max_workers=threads) as pool:
        outcomes = list(pool.map(runner, jobs))

    records = pd.DataFrame(
        [r for rows, _ in outcomes for r in rows],
        columns=["network", "rep", "p", "q", "method", "condition", "estimate", "truth", "deviation"],
    )
    failures = pd.DataFrame(
        [f for _, rows in outcomes for f in rows], columns=["network", "rep", "p", "q", "method", "error"]
    )
    return SimulationResult(summarize(records, list(protocol.methods)), records, failures)
