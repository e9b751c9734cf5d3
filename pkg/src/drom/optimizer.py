"""Primal-dual update rules, the central spectral step and regret bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import linalg
from .losses import RobustParams

# relative change in sigma1 that ends the central power iteration. The spectral
# hinge keeps the top of the dual spectrum clustered near 1, where 1e-10 costs
# thousands of iterations per round; at 1e-7 the broadcast vectors are good to
# about sqrt(1e-7)
CENTRAL_TOL = 1e-7
CENTRAL_MAX_ITER = 20000


@dataclass(frozen=True)
class HyperParams:
    """Optimizer settings.

    ``lam`` and ``rho`` weight the coupling term and the spectral hinge; the
    nuclear norm of ``W`` is steered toward ``rho / lam``. ``reweight=False``
    fixes every weight at 1 (plain convex loss).
    """

    lam: float = 1.0
    rho: float = 1.0
    robust: RobustParams = field(default_factory=RobustParams)
    reweight: bool = True
    svd_tol: float = CENTRAL_TOL
    svd_max_iter: int = CENTRAL_MAX_ITER

    def __post_init__(self):
        if self.lam <= 0 or self.rho <= 0:
            raise ValueError("lam and rho must be positive")

    @property
    def nuclear_target(self) -> float:
        return self.rho / self.lam


@dataclass(frozen=True)
class WorkerState:
    w: np.ndarray
    a: np.ndarray
    uv_col: np.ndarray
    task_id: int

    @classmethod
    def zeros(cls, d: int, task_id: int) -> "WorkerState":
        return cls(np.zeros(d), np.zeros(d), np.zeros(d), task_id)


@dataclass(frozen=True)
class BoundParams:
    D: float = 1.0
    kappa: float = 1.0
    beta: float = 1.0
    m: int = 1
    tau: int = 1

    def __post_init__(self):
        if min(self.D, self.kappa, self.beta) <= 0 or self.m < 1 or self.tau < 1:
            raise ValueError("bound parameters must be positive")


def learning_rate(t: int, tau: int | None = None) -> float:
    """``1/sqrt(t)``, or ``1/sqrt(ceil(t/tau))`` for the periodic schedule."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    if tau is None:
        return 1.0 / math.sqrt(t)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return 1.0 / math.sqrt(-(-t // tau))


def _check_step(grad, gamma, eta):
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if eta <= 0:
        raise ValueError("eta must be positive")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")


def drom_local_step(s: WorkerState, grad, gamma: float, eta: float,
                    lam: float = 1.0, rho: float = 1.0) -> WorkerState:
    """Centralized local step: dual first, then primal with the new dual.

    ``a' = a + eta*(lam*w - rho*uv_col)``;
    ``w' = w - eta*(lam*a' + gamma*grad)``. Skipped entirely when
    ``gamma == 0``.
    """
    _check_step(grad, gamma, eta)
    if gamma == 0:
        return s
    a = s.a + eta * (lam * s.w - rho * s.uv_col)
    w = s.w - eta * (lam * a + gamma * grad)
    return replace(s, w=w, a=a)


def drom_d_local_step(s: WorkerState, grad, gamma: float, eta: float,
                      lam: float = 1.0, rho: float = 1.0) -> WorkerState:
    """Decentralized local step: primal first, then dual with the new primal.

    Always applied; with ``gamma == 0`` only the gradient term vanishes.
    """
    _check_step(grad, gamma, eta)
    w = s.w - eta * (lam * s.a + gamma * grad)
    a = s.a + eta * (lam * w - rho * s.uv_col)
    return replace(s, w=w, a=a)


class SpectralStep(NamedTuple):
    sigma: float
    u: np.ndarray
    v: np.ndarray
    iterations: int

    @property
    def fires(self) -> bool:
        return self.sigma > 1.0

    @property
    def pair(self):
        """``(u, v)`` when the hinge is active, else ``None``."""
        return (self.u, self.v) if self.fires else None


def central_step(A, v0=None, tol: float = CENTRAL_TOL,
                 max_iter: int = CENTRAL_MAX_ITER) -> SpectralStep:
    """Subgradient ``u v^T 1(sigma1(A) > 1)`` of the spectral hinge ``[||A||_2 - 1]_+``.

    The hinge keeps the top of the dual spectrum clustered just around 1,
    so the power iteration stops on a stable ``sigma1`` instead of an exact
    singular vector, and callers pass the previous round's ``v`` as ``v0``.

    When the top two singular values are nearly tied the estimate can creep
    for longer than ``max_iter``; the step then falls back to a dense SVD of
    ``A`` (cheap, since ``A`` has only one column per task) and reports
    ``max_iter`` iterations.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("aggregated dual matrix has non-finite entries")
    try:
        trip = linalg.leading_singular_triple(A, tol=tol, max_iter=max_iter, stop="value", v0=v0)
    except linalg.ConvergenceError:
        U, sig, Vt = np.linalg.svd(A, full_matrices=False)
        u, v = linalg._fix_sign(U[:, 0], Vt[0])
        return SpectralStep(float(sig[0]), u, v, max_iter)
    return SpectralStep(trip.sigma, trip.u, trip.v, trip.iterations)


def regret_bound(bp: BoundParams, hp: HyperParams, T: int, variant: str = "thm1") -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    D, lam, rho = bp.D, hp.lam, hp.rho
    grad_term = (bp.kappa * bp.beta + lam * D) ** 2
    reg_term = (rho + lam * D) ** 2
    if variant == "thm1":
        return bp.m * math.sqrt(T) * (D ** 2 + grad_term + reg_term)
    if variant == "thm2":
        tau = bp.tau
        return math.sqrt(T) * bp.m * tau ** 1.5 * ((D / tau) ** 2 + grad_term + reg_term)
    raise ValueError(f"unknown bound variant {variant!r}")
