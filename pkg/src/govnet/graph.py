"""Communication graph, Laplacian construction, and Kronecker lifts.

The same undirected graph carries both the plant's consensus coupling and
the solver's estimate exchange, so everything here is shared state built
once per scenario. Adjacency is unweighted 0/1; graphs must be connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DisconnectedGraphError(ValueError):
    """Raised when a graph that must be connected is not.

    Carries the vertex sets of the connected components so the error
    message can name them.
    """

    def __init__(self, components: list[list[int]]):
        self.components = components
        parts = "; ".join("{" + ", ".join(str(v) for v in c) + "}" for c in components)
        super().__init__(f"graph is not connected; components: {parts}")


def connected_components(adjacency: np.ndarray) -> list[list[int]]:
    """Connected components of a 0/1 adjacency matrix, as sorted vertex lists."""
    a = np.asarray(adjacency)
    n = a.shape[0]
    seen = np.zeros(n, dtype=bool)
    components = []
    for start in range(n):
        if seen[start]:
            continue
        stack = [start]
        seen[start] = True
        comp = []
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in np.flatnonzero(a[v]):
                if not seen[w]:
                    seen[w] = True
                    stack.append(int(w))
        components.append(sorted(comp))
    return components


def check_connected(graph) -> bool:
    """True iff the graph has a single connected component.

    Accepts a NetworkTopology or a raw adjacency matrix (symmetric 0/1).
    A single vertex counts as connected.
    """
    adjacency = graph.adjacency if isinstance(graph, NetworkTopology) else np.asarray(graph)
    if adjacency.shape[0] == 0:
        return False
    return len(connected_components(adjacency)) == 1


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Undirected communication graph with a non-empty leader set.

    adjacency: n x n symmetric 0/1 matrix, zero diagonal.
    leaders:   indices (0-based) of agents that receive the operator
               reference; delta is their indicator vector.

    Construction validates symmetry, the zero diagonal, connectivity, and
    the leader set, and freezes the arrays. Invalid input raises
    ValueError (DisconnectedGraphError when the graph is split).
    """

    adjacency: np.ndarray
    leaders: tuple[int, ...]
    n: int = 0
    delta: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        n = a.shape[0]
        if n < 1:
            raise ValueError("need at least one agent")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency must have a zero diagonal (no self-loops)")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("adjacency entries must be 0 or 1")
        comps = connected_components(a)
        if len(comps) != 1:
            raise DisconnectedGraphError(comps)
        leaders = tuple(sorted(int(i) for i in self.leaders))
        if not leaders:
            raise ValueError("leader set must be non-empty")
        if any(i < 0 or i >= n for i in leaders):
            raise ValueError(f"leader indices must lie in [0, {n}), got {leaders}")
        if len(set(leaders)) != len(leaders):
            raise ValueError("duplicate leader indices")
        delta = np.zeros(n)
        delta[list(leaders)] = 1.0
        a.setflags(write=False)
        delta.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "leaders", leaders)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "delta", delta)

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def is_leader(self, i: int) -> bool:
        return bool(self.delta[i])

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edge list with i < j."""
        i_idx, j_idx = np.nonzero(np.triu(self.adjacency))
        return [(int(i), int(j)) for i, j in zip(i_idx, j_idx)]


@dataclass(frozen=True, eq=False)
class LaplacianMatrix:
    """Dense graph Laplacian, optionally Kronecker-lifted by blocks of size d.

    entries is (n*d) x (n*d) with block (i, j) equal to L_ij * I_d.
    Row sums are exactly zero; the matrix is symmetric PSD with kernel
    dimension d for a connected graph.
    """

    entries: np.ndarray
    lifted_dim: int = 1

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def build_laplacian(topology: NetworkTopology) -> LaplacianMatrix:
    """Degree matrix minus adjacency. Exact integer arithmetic on 0/1 entries."""
    a = topology.adjacency
    degrees = a.sum(axis=1)
    entries = np.diag(degrees) - a
    return LaplacianMatrix(entries=entries, lifted_dim=1)


def kronecker_lift(laplacian: LaplacianMatrix, d: int) -> LaplacianMatrix:
    """Lift L to L (x) I_d so it acts on stacked d-vectors per agent."""
    if d < 1:
        raise ValueError(f"lift dimension must be >= 1, got {d}")
    if d == 1:
        return laplacian
    entries = np.kron(laplacian.entries, np.eye(d))
    return LaplacianMatrix(entries=entries, lifted_dim=laplacian.lifted_dim * d)


def apply_lifted(laplacian: np.ndarray, x: np.ndarray, d: int) -> np.ndarray:
    """Compute (L (x) I_d) @ x without forming the Kronecker product.

    x is a stacked vector of n blocks of size d; returns the same shape.
    """
    n = laplacian.shape[0]
    return (laplacian @ x.reshape(n, d)).reshape(-1)
