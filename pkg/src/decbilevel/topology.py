"""Communication graphs and consensus (mixing) matrices.

Graphs are undirected, simple and connected. The mixing matrix is the
Laplacian-based choice ``M = I - 2 L / (3 lambda_max(L))``, which is
symmetric, doubly stochastic and has the sparsity pattern of the graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from decbilevel.rng import TAG_GRAPH, make_rng

MAX_ER_ATTEMPTS = 1000


class TopologyError(ValueError):
    """Raised for invalid or disconnected graphs and invalid mixing matrices."""


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on agents ``0..m-1``.

    ``edges`` holds sorted pairs ``(i, j)`` with ``i < j`` in lexicographic
    order; neighbor lists are derived and sorted ascending.
    """

    m: int
    edges: tuple[tuple[int, int], ...]
    neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.m < 1:
            raise TopologyError(f"agent count must be positive, got {self.m}")
        canon = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise TopologyError(f"self-loop at agent {i}")
            if not (0 <= i < self.m and 0 <= j < self.m):
                raise TopologyError(f"edge ({i}, {j}) out of range for m={self.m}")
            canon.add((min(i, j), max(i, j)))
        edges = tuple(sorted(canon))
        nbrs: list[list[int]] = [[] for _ in range(self.m)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(n)) for n in nbrs))

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors], dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.m, self.m))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.neighbors[i]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.m

    def to_edgelist(self) -> str:
        """Plain-text form: ``m`` on the first line, then one ``i j`` per edge."""
        lines = [str(self.m)] + [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edgelist(cls, text: str) -> "Graph":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or len(rows[0]) != 1:
            raise TopologyError("edge list must start with the agent count on its own line")
        m = int(rows[0][0])
        edges = []
        for k, row in enumerate(rows[1:], start=2):
            if len(row) != 2:
                raise TopologyError(f"line {k}: expected 'i j', got {' '.join(row)!r}")
            edges.append((int(row[0]), int(row[1])))
        return cls(m, tuple(edges))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_edgelist(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Graph":
        return cls.from_edgelist(Path(path).read_text(encoding="utf-8"))


def generate_er_graph(m: int, p: float, seed: int) -> Graph:
    """Draw a connected Erdos-Renyi graph G(m, p).

    Each pair ``i < j`` is visited in lexicographic order and kept with
    probability ``p``. Disconnected draws are rejected and redrawn from the
    next sub-stream ``(seed, attempt)``.
    """
    if m < 2:
        raise TopologyError(f"need at least 2 agents, got m={m}")
    if not (0.0 < p <= 1.0):
        raise TopologyError(f"edge probability must lie in (0, 1], got p={p}")
    iu, ju = np.triu_indices(m, k=1)
    for attempt in range(MAX_ER_ATTEMPTS):
        rng = make_rng(seed, TAG_GRAPH, attempt)
        keep = rng.random(iu.size) < p
        g = Graph(m, tuple(zip(iu[keep].tolist(), ju[keep].tolist())))
        if g.is_connected():
            return g
    raise TopologyError(
        f"no connected G({m}, {p}) graph in {MAX_ER_ATTEMPTS} draws; p is too small for m"
    )


def complete_graph(m: int) -> Graph:
    iu, ju = np.triu_indices(m, k=1)
    return Graph(m, tuple(zip(iu.tolist(), ju.tolist())))


def laplacian(g: Graph) -> np.ndarray:
    """Combinatorial Laplacian ``D - A``."""
    a = g.adjacency()
    return np.diag(a.sum(axis=1)) - a


@dataclass(frozen=True)
class ConsensusMatrix:
    """Symmetric doubly stochastic mixing matrix and its spectral quantity.

    ``lam`` is the second-largest eigenvalue magnitude,
    ``max(|lambda_2|, |lambda_m|)``.
    """

    entries: np.ndarray
    lam: float

    @property
    def m(self) -> int:
        return self.entries.shape[0]


def spectral_gap(M: ConsensusMatrix | np.ndarray) -> float:
    """Second-largest eigenvalue magnitude of a symmetric mixing matrix.

    Raises
    ------
    TopologyError
        If the top eigenvalue is not 1, some eigenvalue is <= -1, or the
        value 1 is repeated (disconnected graph).
    """
    w = M.entries if isinstance(M, ConsensusMatrix) else np.asarray(M, dtype=float)
    ev = np.linalg.eigvalsh(w)  # ascending
    tol = 1e-9
    if abs(ev[-1] - 1.0) > tol:
        raise TopologyError(f"largest eigenvalue is {ev[-1]!r}, expected 1")
    if ev[0] <= -1.0 + tol:
        raise TopologyError(f"eigenvalue {ev[0]!r} is not in (-1, 1]")
    if ev.size == 1:
        return 0.0
    lam = float(max(abs(ev[-2]), abs(ev[0])))
    if lam >= 1.0 - tol:
        raise TopologyError("eigenvalue 1 is repeated; the graph is disconnected")
    return lam


def build_consensus_matrix(g: Graph) -> ConsensusMatrix:
    if not g.is_connected():
        raise TopologyError("graph is disconnected; mixing would not contract")
    lap = laplacian(g)
    lmax = float(np.linalg.eigvalsh(lap)[-1])
    if g.m == 1:
        return ConsensusMatrix(np.ones((1, 1)), 0.0)
    w = np.eye(g.m) - (2.0 / (3.0 * lmax)) * lap
    # exact symmetry regardless of rounding in the scaling
    w = 0.5 * (w + w.T)
    return ConsensusMatrix(w, spectral_gap(w))


def check_consensus_matrix(M: ConsensusMatrix, g: Graph, tol: float = 1e-12) -> None:
    """Assert symmetry, double stochasticity and graph sparsity."""
    w = M.entries
    if not np.array_equal(w, w.T):
        raise TopologyError("mixing matrix is not symmetric")
    ones = np.ones(g.m)
    if np.max(np.abs(w @ ones - 1.0)) > tol or np.max(np.abs(w.T @ ones - 1.0)) > tol:
        raise TopologyError("mixing matrix is not doubly stochastic")
    allowed = g.adjacency() + np.eye(g.m)
    if np.any((w > 0) != (allowed > 0)) or np.any(w < 0):
        raise TopologyError("mixing matrix sparsity does not match the graph")
