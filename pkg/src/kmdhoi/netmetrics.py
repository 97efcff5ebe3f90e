"""Binary correlation networks over unit summaries and simple node metrics."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimpleGraph:
    labels: tuple[str, ...]
    adjacency: np.ndarray

    def __post_init__(self):
        A = self.adjacency
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(self.labels):
            raise ValueError("adjacency must be square and match the labels")
        if A.dtype != bool:
            raise ValueError("adjacency must be boolean")
        if not np.array_equal(A, A.T) or A.diagonal().any():
            raise ValueError("adjacency must be symmetric without self-loops")

    @classmethod
    def from_edges(cls, n: int, edges, labels=None) -> "SimpleGraph":
        A = np.zeros((n, n), dtype=bool)
        for a, b in edges:
            if a != b:
                A[a, b] = A[b, a] = True
        return cls(tuple(labels) if labels is not None else tuple(str(i) for i in range(n)), A)

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    def neighbors(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[v])


def roi_summary(view_slice, weights: str = "sd") -> np.ndarray:
    """Per-subject weighted mean of the columns.

    ``weights="sd"`` weights columns by their standard deviation normalised to
    sum 1; ``"uniform"`` is the plain mean. All-constant input falls back to
    uniform weights.
    """
    M = np.asarray(view_slice, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.shape[1] < 1:
        raise ValueError("need at least one column")
    if weights == "uniform":
        w = np.full(M.shape[1], 1.0 / M.shape[1])
    elif weights == "sd":
        sd = M.std(axis=0, ddof=1) if M.shape[0] > 1 else np.zeros(M.shape[1])
        w = sd / sd.sum() if sd.sum() > 0 else np.full(M.shape[1], 1.0 / M.shape[1])
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    return M @ w


def correlation_graph(summaries, threshold: float, labels=None) -> SimpleGraph:
    """Edge between columns ``i`` and ``j`` iff their Pearson correlation exceeds ``threshold``."""
    S = np.asarray(summaries, dtype=float)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ValueError("need an n x m matrix with m >= 2")
    m = S.shape[1]
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(m))
    Sc = S - S.mean(axis=0)
    norms = np.sqrt(np.sum(Sc * Sc, axis=0))
    constant = norms == 0
    for j in np.flatnonzero(constant):
        log.warning("column %s is constant; correlation undefined, node isolated", labels[j])
    safe = np.where(constant, 1.0, norms)
    R = (Sc.T @ Sc) / np.outer(safe, safe)
    A = R > threshold
    A[constant, :] = False
    A[:, constant] = False
    np.fill_diagonal(A, False)
    A = A & A.T
    return SimpleGraph(labels, A)


def node_degree(g: SimpleGraph, v: int) -> int:
    return int(g.adjacency[v].sum())


def node_transitivity(g: SimpleGraph, v: int) -> float:
    """Fraction of neighbour pairs of ``v`` that are themselves adjacent (0 when degree < 2)."""
    nb = g.neighbors(v)
    k = len(nb)
    if k < 2:
        return 0.0
    links = int(g.adjacency[np.ix_(nb, nb)].sum()) // 2
    return links / (k * (k - 1) / 2)


def shortest_path_lengths(g: SimpleGraph, source: int) -> np.ndarray:
    """BFS hop counts from ``source``; unreachable nodes get ``inf``."""
    dist = np.full(g.n_nodes, np.inf)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in g.neighbors(u):
            if dist[w] == np.inf:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def nodal_efficiency(g: SimpleGraph, v: int) -> float:
    """Mean of ``1/d(v, u)`` over ``u != v``, with unreachable nodes contributing 0."""
    n = g.n_nodes
    if n < 2:
        return 0.0
    d = np.delete(shortest_path_lengths(g, v), v)
    # fsum makes the value independent of node order
    return math.fsum(1.0 / d) / (n - 1)


def global_efficiency(g: SimpleGraph) -> float:
    return float(np.mean([nodal_efficiency(g, v) for v in range(g.n_nodes)])) if g.n_nodes else 0.0


@dataclass(frozen=True)
class NodeMetrics:
    node: str
    transitivity: float
    degree: int
    nodal_efficiency: float


def node_table(g: SimpleGraph) -> list[NodeMetrics]:
    return [
        NodeMetrics(g.labels[v], node_transitivity(g, v), node_degree(g, v), nodal_efficiency(g, v))
        for v in range(g.n_nodes)
    ]
