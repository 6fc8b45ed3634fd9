import logging
from typing import Optional, Sequence

import numpy as np

from models.data_models import BetaBinomialPrior, DirectedGraph
from models.errors import ConfigError

logger = logging.getLogger(__name__)


def _from_dense(adjacency: np.ndarray, node_group: Optional[Sequence[str]] = None) -> DirectedGraph:
    """adjacency[dst, src] = True means an edge src -> dst"""
    np.fill_diagonal(adjacency, False)
    rows = [np.flatnonzero(row).tolist() for row in adjacency]
    return DirectedGraph(
        n_nodes=adjacency.shape[0],
        in_neighbors=rows,
        node_group=list(node_group) if node_group is not None else None,
    )


def generate_er(n: int, density: float, seed=None, node_group: Optional[Sequence[str]] = None) -> DirectedGraph:
    """Directed Erdos-Renyi graph: every ordered pair i != j linked with probability density"""
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    if not 0.0 <= density <= 1.0:
        raise ConfigError(f"density must lie in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    adjacency = rng.random((n, n)) < density
    return _from_dense(adjacency, node_group)


def generate_heterogeneous(
    n: int, prior: BetaBinomialPrior, seed=None, node_group: Optional[Sequence[str]] = None
) -> DirectedGraph:
    """Graph whose in-degrees follow the beta-binomial prior.

    Each node draws a link propensity from Beta(a, b) with mean mu and
    intra-class correlation rho, then links in from every other node with
    that propensity. rho = 0 gives generate_er at density mu.
    """
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    if prior.size != n - 1:
        raise ConfigError(f"prior size must be n - 1 = {n - 1}, got {prior.size}")
    rng = np.random.default_rng(seed)
    if prior.rho == 0.0 or prior.mu in (0.0, 1.0):
        propensity = np.full(n, prior.mu)
    else:
        a = prior.mu * (1.0 - prior.rho) / prior.rho
        b = (1.0 - prior.mu) * (1.0 - prior.rho) / prior.rho
        propensity = rng.beta(a, b, size=n)
    adjacency = rng.random((n, n)) < propensity[:, None]
    graph = _from_dense(adjacency, node_group)
    logger.debug("generated heterogeneous graph: n=%d, edges=%d", n, graph.n_edges)
    return graph
