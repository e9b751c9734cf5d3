"""Matrix primitives: sparse vectors, leading singular triple, small full SVD.

Matrices are plain 2-D float ndarrays laid out as ``d x m``; column ``i``
belongs to task ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SVD_ORACLE_CAP = 64
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1000


class ConvergenceError(RuntimeError):
    """Power iteration ran out of iterations.

    The last residual ``||M^T u - sigma v||`` is kept on ``residual``.
    """

    def __init__(self, msg: str, residual: float, iterations: int):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SparseVector:
    """Sparse vector with 0-based ``indices`` and matching ``values``."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values differ in length")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise ValueError(f"index out of range for dimension {self.dim}")

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        x = np.asarray(x, dtype=float)
        idx = np.flatnonzero(x)
        return cls(idx, x[idx].copy(), x.shape[0])

    def dot(self, w: np.ndarray) -> float:
        return float(w[self.indices] @ self.values)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.values @ self.values))


class SingularTriple(NamedTuple):
    sigma: float
    u: np.ndarray
    v: np.ndarray
    iterations: int = 0


def _check_finite(M: np.ndarray) -> None:
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")


def _fix_sign(u: np.ndarray, v: np.ndarray):
    nz = np.flatnonzero(np.abs(u) > 1e-12)
    if nz.size and u[nz[0]] < 0:
        return -u, -v
    return u, v


def _start_vector(m: int) -> np.ndarray:
    v = np.ones(m)
    v[0] += 0.5
    return v / np.linalg.norm(v)


def leading_singular_triple(M, tol: float = DEFAULT_TOL,
                            max_iter: int = DEFAULT_MAX_ITER,
                            stop: str = "residual", v0=None) -> SingularTriple:
    """Leading singular triple of ``M`` by power iteration on ``v -> M^T (M v)``.

    Each iteration costs two matrix-vector products, O(dm). The default start
    vector is fixed, so repeated calls return bitwise-identical results;
    ``v0`` overrides it (warm start from a nearby matrix's right vector).

    ``stop="residual"`` iterates until ``||M^T u - sigma v|| <= tol * max(1, sigma)``.
    ``stop="value"`` iterates until the estimate of ``sigma`` changes by at
    most ``tol * max(1, sigma)`` between iterations; with a clustered top
    spectrum this returns some unit vector from the leading cluster instead
    of grinding toward one particular singular vector. Either way
    ``M v = sigma u`` holds to rounding.

    A zero matrix yields ``sigma = 0`` with ``u = e1`` and ``v = e1``.
    Raises :class:`ConvergenceError` if ``max_iter`` is exhausted.
    """
    if stop not in ("residual", "value"):
        raise ValueError(f"unknown stopping rule {stop!r}")
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter >= 1")
    _check_finite(M)
    d, m = M.shape
    if not np.any(M):
        return SingularTriple(0.0, np.eye(d)[0], np.eye(m)[0], 0)

    if v0 is None:
        v = _start_vector(m)
    else:
        v = np.asarray(v0, dtype=float)
        nv = np.linalg.norm(v)
        if v.shape != (m,) or not np.isfinite(nv) or nv == 0:
            raise ValueError("v0 must be a nonzero finite vector of length m")
        v = v / nv
    residual = np.inf
    prev_sigma = -np.inf
    by_value = stop == "value"
    for it in range(1, max_iter + 1):
        Mv = M @ v
        sigma = math.sqrt(Mv @ Mv)
        if sigma == 0.0:
            # start vector in the null space; nudge deterministically
            v = np.roll(v, 1) + np.eye(m)[it % m]
            v /= np.linalg.norm(v)
            continue
        u = Mv / sigma
        Mtu = M.T @ u
        if by_value:
            done = abs(sigma - prev_sigma) <= tol * max(1.0, sigma)
            prev_sigma = sigma
        else:
            residual = math.sqrt(_sq_norm(Mtu - sigma * v))
            done = residual <= tol * max(1.0, sigma)
        if done:
            v = Mtu / math.sqrt(Mtu @ Mtu)
            # recompute u from the final v so that M v = sigma u holds
            Mv = M @ v
            sigma = math.sqrt(Mv @ Mv)
            u, v = _fix_sign(Mv / sigma, v)
            return SingularTriple(sigma, u, v, it)
        v = Mtu / math.sqrt(Mtu @ Mtu)
    if by_value:
        residual = math.sqrt(_sq_norm(M.T @ u - sigma * v)) if sigma > 0 else np.inf
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(residual {residual:.3e})", residual, max_iter)


def _sq_norm(x: np.ndarray) -> float:
    return float(x @ x)


def _jacobi(G: np.ndarray, max_sweeps: int = 80):
    """One-sided Jacobi on the columns of ``G`` (d x n, n <= d), in place.

    Returns the accumulated right rotation ``V`` with ``G_in @ V = G_out``.
    """
    n = G.shape[1]
    V = np.eye(n)
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = G[:, p]
                gq = G[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if abs(gamma) <= eps * np.sqrt(alpha * beta) or abs(gamma) <= eps * eps * max(alpha, beta):
                    # columns already orthogonal to working precision
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                G[:, p], G[:, q] = c * gp - s * gq, s * gp + c * gq
                vp = V[:, p].copy()
                V[:, p], V[:, q] = c * vp - s * V[:, q], s * vp + c * V[:, q]
        if not rotated:
            break
    return V


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``U`` not in ``keep`` by an orthonormal completion."""
    d, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    e = 0
    for j in range(k):
        if keep[j]:
            continue
        while True:
            cand = np.zeros(d)
            cand[e % d] = 1.0
            e += 1
            for b in basis:
                cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-8:
                cand /= nrm
                break
        basis.append(cand)
        out[:, j] = cand
    return out


def full_svd(M):
    """Thin SVD ``M = U diag(sigmas) V^T`` via one-sided Jacobi.

    Intended as a test oracle for small inputs; refuses ``min(d, m) > 64``.
    ``sigmas`` are sorted nonincreasing.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    _check_finite(M)
    d, m = M.shape
    if min(d, m) > SVD_ORACLE_CAP:
        raise ValueError(f"full_svd oracle is capped at min(d, m) <= {SVD_ORACLE_CAP}")
    if d < m:
        V, s, U = full_svd(M.T)
        return U, s, V

    G = M.copy()
    V = _jacobi(G)
    sigmas = np.linalg.norm(G, axis=0)
    order = np.argsort(-sigmas, kind="stable")
    sigmas = sigmas[order]
    G = G[:, order]
    V = V[:, order]
    keep = sigmas > (sigmas[0] if m else 0.0) * 1e-14
    keep &= sigmas > 0
    U = np.zeros_like(G)
    U[:, keep] = G[:, keep] / sigmas[keep]
    if not np.all(keep):
        U = _complete_basis(U, keep)
    return U, sigmas, V


def nuclear_norm(M) -> float:
    return float(np.sum(full_svd(M)[1]))


def _is_stochastic(S: np.ndarray) -> bool:
    return bool(np.all(S >= -1e-12) and np.allclose(S.sum(axis=1), 1.0, atol=1e-12, rtol=0))


def second_largest_abs_eigenvalue(S) -> float:
    """``max(|lambda_2|, |lambda_m|)`` of a symmetric mixing matrix.

    Input that is not already row-stochastic is row-normalized first
    (``D^{-1} S``; its spectrum is computed through the similar symmetric
    matrix ``D^{-1/2} S D^{-1/2}``). Values below 1e-12 are reported as 0.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(S, S.T, atol=1e-12, rtol=0):
        raise ValueError("matrix is not symmetric")
    m = S.shape[0]
    if m < 2:
        return 0.0
    if not _is_stochastic(S):
        deg = S.sum(axis=1)
        if np.any(deg <= 0):
            raise ValueError("row with nonpositive sum cannot be normalized")
        scale = 1.0 / np.sqrt(deg)
        S = S * scale[:, None] * scale[None, :]
    lam = np.sort(np.linalg.eigvalsh(S))[::-1]
    zeta = max(abs(lam[1]), abs(lam[-1]))
    if zeta < 1e-12:
        return 0.0
    return float(zeta)
