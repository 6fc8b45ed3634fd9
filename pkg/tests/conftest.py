import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from scipy.special import expit  # noqa: E402

from estimation.exposure import classify  # noqa: E402
from estimation.mixture import ExperimentData  # noqa: E402
from models.data_models import BinomialLogit, CorruptionSpec, ExperimentDesign, GaussianLinear  # noqa: E402
from network.generators import generate_er  # noqa: E402
from network.graph import corrupt, from_edges, in_degrees  # noqa: E402

TRUTH = GaussianLinear(alpha=(0.0, 0.25, 0.5, 1.0), beta=(0.05, 0.1, 0.05, 0.1), sigma2=0.25)
BINOMIAL_TRUTH = BinomialLogit(alpha=(-1.0, -0.5, 0.0, 0.5), beta=(0.1, 0.1, 0.05, 0.05), trials=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_in_graph():
    """0 -> 2 and 1 -> 2"""
    return from_edges(3, [(0, 2), (1, 2)])


@pytest.fixture
def four_cycle():
    """0 -> 1 -> 2 -> 3 -> 0: every node has in-degree 1"""
    return from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0)])


def simulate_design(graph, assign_prob, family, seed):
    """Bernoulli assignment and outcomes drawn at each node's true (condition, degree)"""
    rng = np.random.default_rng(seed)
    t = (rng.random(graph.n_nodes) < assign_prob).astype(np.int64)
    degree = in_degrees(graph)
    treated = np.array([sum(t[j] for j in row) for row in graph.in_neighbors])
    condition = 2 * t + (treated > 0)
    eta = np.asarray(family.alpha)[condition] + np.asarray(family.beta)[condition] * degree
    y = rng.normal(eta, np.sqrt(family.sigma2))
    return ExperimentDesign(treatment=t.tolist(), assign_prob=assign_prob, outcomes=y.tolist())


@pytest.fixture
def small_experiment():
    """(design, graph) on a 40-node ER graph with outcomes from TRUTH"""
    graph = generate_er(40, 0.1, seed=7)
    return simulate_design(graph, 0.5, TRUTH, seed=8), graph


def corrupted_experiment(seed, family="gaussian"):
    """30 subjects with outcomes on the true graph, observed through p=0.2, q=0.02"""
    g = generate_er(30, 0.12, seed=seed)
    rng = np.random.default_rng(seed)
    t = (rng.random(g.n_nodes) < 0.5).astype(int)
    condition = classify(t, g)
    truth = TRUTH if family == "gaussian" else BINOMIAL_TRUTH
    eta = np.asarray(truth.alpha)[condition] + np.asarray(truth.beta)[condition] * in_degrees(g)
    if family == "gaussian":
        y = rng.normal(eta, np.sqrt(TRUTH.sigma2))
    else:
        y = rng.binomial(BINOMIAL_TRUTH.trials, expit(eta)).astype(float)
    design = ExperimentDesign(treatment=t.tolist(), assign_prob=0.5, outcomes=y.tolist())
    observed = corrupt(g, CorruptionSpec(p=0.2, q=0.02), seed=seed + 1000)
    return ExperimentData([(design, observed)])
