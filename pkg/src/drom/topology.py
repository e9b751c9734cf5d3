"""Communication graphs for decentralized periodic synchronization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import second_largest_abs_eigenvalue

KINDS = ("full", "grid", "ring")


@dataclass(frozen=True, eq=False)
class Topology:
    """Binary adjacency ``S`` (unit diagonal), sync interval and mixing metric."""

    kind: str
    adjacency: np.ndarray
    tau: int
    zeta: float

    @property
    def m(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        """Neighbors of ``i`` excluding ``i`` itself."""
        nb = np.flatnonzero(self.adjacency[i])
        return nb[nb != i]


def grid_shape(m: int) -> tuple[int, int]:
    r = int(math.isqrt(m))
    while m % r:
        r -= 1
    return r, m // r


def _adjacency(kind: str, m: int) -> np.ndarray:
    if kind == "full":
        return np.ones((m, m))
    S = np.eye(m)
    if kind == "ring":
        for i in range(m):
            S[i, (i + 1) % m] = S[(i + 1) % m, i] = 1.0
        return S
    if kind == "grid":
        rows, cols = grid_shape(m)
        for r in range(rows):
            for c in range(cols):
                i = r * cols + c
                if c + 1 < cols:
                    S[i, i + 1] = S[i + 1, i] = 1.0
                if r + 1 < rows:
                    S[i, i + cols] = S[i + cols, i] = 1.0
        return S
    raise ValueError(f"unknown topology {kind!r}; expected one of {', '.join(KINDS)}")


def metropolis_weights(S: np.ndarray) -> np.ndarray:
    """Doubly stochastic mixing matrix with ``1/(1 + max(deg_i, deg_j))`` off-diagonal."""
    S = np.asarray(S, dtype=float)
    m = S.shape[0]
    adj = (S != 0) & ~np.eye(m, dtype=bool)
    deg = adj.sum(axis=1)
    W = np.zeros((m, m))
    for i in range(m):
        for j in np.flatnonzero(adj[i]):
            W[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
    W[np.diag_indices(m)] = 1.0 - W.sum(axis=1)
    return W


def _connected(S: np.ndarray) -> bool:
    m = S.shape[0]
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(S[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == m


def from_adjacency(S, tau: int = 1, kind: str = "custom") -> Topology:
    S = np.array(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(S, S.T):
        raise ValueError("adjacency must be symmetric")
    if not np.all((S == 0) | (S == 1)):
        raise ValueError("adjacency must be binary")
    if not np.all(np.diag(S) == 1):
        raise ValueError("adjacency must have a unit diagonal")
    if not _connected(S):
        raise ValueError("graph is disconnected")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    S.setflags(write=False)
    zeta = second_largest_abs_eigenvalue(metropolis_weights(S)) if S.shape[0] > 1 else 0.0
    return Topology(kind, S, int(tau), zeta)


def build_topology(kind: str, m: int, tau: int = 1) -> Topology:
    if m < 2:
        raise ValueError("need at least two tasks")
    return from_adjacency(_adjacency(kind, m), tau, kind)


def schedule_matrix(topo: Topology, t: int) -> np.ndarray:
    """``S`` on sync rounds (``t % tau == 0``), identity otherwise."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    if t % topo.tau == 0:
        return topo.adjacency
    return np.eye(topo.m)


def is_sync_round(topo: Topology, t: int) -> bool:
    return t % topo.tau == 0


def neighbor_aggregate(A, topo, i: int) -> np.ndarray:
    """``A @ Diag(S[i])``: keep the columns of ``i``'s neighbors, zero the rest.

    ``topo`` is a :class:`Topology` or a mask matrix such as the output of
    :func:`schedule_matrix`.
    """
    S = topo.adjacency if isinstance(topo, Topology) else np.asarray(topo)
    A = np.asarray(A, dtype=float)
    m = S.shape[0]
    if A.ndim != 2 or A.shape[1] != m:
        raise ValueError(f"expected {m} columns, got {A.shape[-1]}")
    if not 0 <= i < m:
        raise IndexError(f"task index {i} out of range")
    return A * S[i][None, :]
