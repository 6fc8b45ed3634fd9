"""Directed influence networks: degree statistics and the edge corruption process."""

import logging
from collections import Counter
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from models.data_models import STRATUM_ALL, STRATUM_BETWEEN, STRATUM_WITHIN, CorruptionSpec, DirectedGraph
from models.errors import ConfigError

logger = logging.getLogger(__name__)


def from_edges(
    n_nodes: int,
    edges: Iterable[Tuple[int, int]],
    strata: Optional[Sequence[str]] = None,
    node_group: Optional[Sequence[str]] = None,
) -> DirectedGraph:
    """Build a graph from (src, dst) pairs; strata, if given, align with edges"""
    rows: List[List[int]] = [[] for _ in range(n_nodes)]
    labels: Optional[List[List[str]]] = [[] for _ in range(n_nodes)] if strata is not None else None
    for k, (src, dst) in enumerate(edges):
        dst = int(dst)
        if not 0 <= dst < n_nodes:
            raise ValueError(f"node index {dst} out of range [0, {n_nodes})")
        rows[dst].append(int(src))
        if labels is not None:
            labels[dst].append(str(strata[k]))
    return DirectedGraph(
        n_nodes=n_nodes,
        in_neighbors=rows,
        edge_stratum=labels,
        node_group=list(node_group) if node_group is not None else None,
    )


def edges(g: DirectedGraph) -> List[Tuple[int, int]]:
    """All edges as (src, dst), ordered by destination then source"""
    return [(src, dst) for dst, row in enumerate(g.in_neighbors) for src in row]


def density(g: DirectedGraph) -> float:
    """|E| / (n(n-1)) over the directed no-self-loop universe"""
    if g.n_nodes < 2:
        return 0.0
    return g.n_edges / (g.n_nodes * (g.n_nodes - 1))


def in_adjacency(g: DirectedGraph) -> sparse.csr_matrix:
    """Sparse matrix A with A[dst, src] = 1"""
    pairs = edges(g)
    if not pairs:
        return sparse.csr_matrix((g.n_nodes, g.n_nodes), dtype=np.int64)
    src, dst = np.array(pairs, dtype=np.int64).T
    data = np.ones(len(pairs), dtype=np.int64)
    return sparse.csr_matrix((data, (dst, src)), shape=(g.n_nodes, g.n_nodes))


def in_degree(g: DirectedGraph, i: int) -> int:
    if not 0 <= i < g.n_nodes:
        raise IndexError(f"node {i} out of range [0, {g.n_nodes})")
    return len(g.in_neighbors[i])


def in_degrees(g: DirectedGraph) -> np.ndarray:
    return np.array([len(row) for row in g.in_neighbors], dtype=np.int64)


def _treatment_array(g: DirectedGraph, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.shape != (g.n_nodes,):
        raise ValueError(f"treatment vector has length {t.size}, graph has {g.n_nodes} nodes")
    return t


def treated_in_degree(g: DirectedGraph, i: int, t) -> int:
    t = _treatment_array(g, t)
    if not 0 <= i < g.n_nodes:
        raise IndexError(f"node {i} out of range [0, {g.n_nodes})")
    return int(sum(t[j] for j in g.in_neighbors[i]))


def treated_in_degrees(g: DirectedGraph, t) -> np.ndarray:
    t = _treatment_array(g, t)
    return np.asarray(in_adjacency(g) @ t).ravel().astype(np.int64)


def corrupt(g: DirectedGraph, spec: CorruptionSpec, seed=None) -> DirectedGraph:
    """Observed version of g: drop each true edge w.p. p, add each ordered non-edge w.p. q.

    False edges are drawn as a Binomial count of additions followed by a uniform
    sample of distinct non-edges, which has the same law as per-pair Bernoulli
    draws. In density_scaled mode the false-edge probability is q * density(g).
    """
    rng = np.random.default_rng(seed)
    scale = density(g) if spec.q_mode == "density_scaled" else 1.0
    if spec.per_stratum is not None:
        if g.node_group is None:
            raise ConfigError("stratified corruption needs node_group on the graph")
        missing = sorted(set(group_strata(g)) - set(spec.per_stratum))
        if missing:
            raise ConfigError(f"no corruption parameters for strata: {', '.join(missing)}")

    true_edges = edges(g)
    kept: List[Tuple[int, int]] = []
    if true_edges:
        draws = rng.random(len(true_edges))
        for (src, dst), u in zip(true_edges, draws):
            label = g.pair_stratum(src, dst) if spec.per_stratum is not None else None
            p, _ = spec.for_stratum(label)
            if u >= p:
                kept.append((src, dst))

    if spec.per_stratum is None:
        q = min(spec.q * scale, np.nextafter(1.0, 0.0))
        added = _sample_false_edges(g, q, rng)
    else:
        added = []
        for label in sorted(spec.per_stratum):
            q = min(spec.per_stratum[label][1] * scale, np.nextafter(1.0, 0.0))
            added.extend(_sample_false_edges_in_stratum(g, label, q, rng))

    if g.edge_stratum is not None and g.node_group is None:
        if not added:
            label_of = {
                (src, dst): lab
                for dst, (row, labs) in enumerate(zip(g.in_neighbors, g.edge_stratum))
                for src, lab in zip(row, labs)
            }
            return from_edges(g.n_nodes, kept, strata=[label_of[e] for e in kept])
        logger.debug("dropping edge labels: added edges have no stratum without node groups")
    return from_edges(g.n_nodes, kept + added, node_group=g.node_group)


def group_strata(g: DirectedGraph) -> List[str]:
    """Strata with at least one ordered pair, given the graph's node groups"""
    if g.node_group is None:
        return [STRATUM_ALL]
    counts = Counter(g.node_group)
    strata = []
    if any(c > 1 for c in counts.values()):
        strata.append(STRATUM_WITHIN)
    if len(counts) > 1:
        strata.append(STRATUM_BETWEEN)
    return strata


def _sample_false_edges(g: DirectedGraph, q: float, rng: np.random.Generator) -> List[Tuple[int, int]]:
    n = g.n_nodes
    universe = n * (n - 1) - g.n_edges
    if q <= 0.0 or universe <= 0:
        return []
    k = int(rng.binomial(universe, q))
    if k == 0:
        return []
    existing = set(edges(g))
    if 2 * k > universe:
        candidates = [(s, d) for d in range(n) for s in range(n) if s != d and (s, d) not in existing]
        pick = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[j] for j in np.sort(pick)]
    chosen: dict = {}
    while len(chosen) < k:
        need = k - len(chosen)
        src = rng.integers(0, n, size=2 * need + 8)
        dst = rng.integers(0, n, size=2 * need + 8)
        for s, d in zip(src.tolist(), dst.tolist()):
            if s == d or (s, d) in existing or (s, d) in chosen:
                continue
            chosen[(s, d)] = None
            if len(chosen) == k:
                break
    return list(chosen)


def _sample_false_edges_in_stratum(
    g: DirectedGraph, label: str, q: float, rng: np.random.Generator
) -> List[Tuple[int, int]]:
    if q <= 0.0:
        return []
    existing = set(edges(g))
    n = g.n_nodes
    candidates = [
        (s, d)
        for d in range(n)
        for s in range(n)
        if s != d and (s, d) not in existing and g.pair_stratum(s, d) == label
    ]
    if not candidates:
        return []
    k = int(rng.binomial(len(candidates), q))
    pick = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[j] for j in np.sort(pick)]
