"""Per-task convex losses and capped L_p reweighting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import SparseVector


class LossKind(str, Enum):
    HINGE = "hinge"
    LOGISTIC = "logistic"


@dataclass(frozen=True)
class RobustParams:
    """Capped L_p parameters: ``h(u) = min(u**p, xi)``.

    ``gamma_clamp_eps`` floors the loss before evaluating the weight, which
    bounds the weight by ``p * eps**(p - 1)``.
    """

    p: float = 0.5
    xi: float = 1.0
    gamma_clamp_eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.xi <= 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if self.gamma_clamp_eps <= 0:
            raise ValueError("gamma_clamp_eps must be positive")

    @property
    def kappa(self) -> float:
        """Upper bound on any weight returned by :func:`capped_lp_weight`."""
        return self.p * self.gamma_clamp_eps ** (self.p - 1.0)


def _inner(w: np.ndarray, x) -> float:
    if isinstance(x, SparseVector):
        if x.dim != w.shape[0]:
            raise ValueError(f"dimension mismatch: w has {w.shape[0]}, x has {x.dim}")
        return x.dot(w)
    x = np.asarray(x, dtype=float)
    if x.shape != w.shape:
        raise ValueError(f"dimension mismatch: w has {w.shape}, x has {x.shape}")
    return float(w @ x)


def _scaled(x, c: float, d: int) -> np.ndarray:
    if isinstance(x, SparseVector):
        g = np.zeros(d)
        g[x.indices] = c * x.values
        return g
    return c * np.asarray(x, dtype=float)


def predict(w: np.ndarray, x) -> int:
    """Sign of the score; a score of exactly zero predicts +1."""
    return 1 if _inner(w, x) >= 0.0 else -1


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def loss_and_subgradient(kind, w: np.ndarray, x, y: int):
    """Loss value and a subgradient with respect to ``w``.

    ``x`` may be dense or a :class:`SparseVector`; the gradient is dense.
    """
    kind = LossKind(kind)
    w = np.asarray(w, dtype=float)
    margin = y * _inner(w, x)
    d = w.shape[0]
    if kind is LossKind.HINGE:
        loss = 1.0 - margin
        if loss > 0.0:
            return loss, _scaled(x, -float(y), d)
        return 0.0, np.zeros(d)
    # log(1 + exp(-margin)) without overflow
    loss = max(-margin, 0.0) + math.log1p(math.exp(-abs(margin)))
    return loss, _scaled(x, -y * _sigmoid(-margin), d)


def loss_value(kind, w: np.ndarray, x, y: int) -> float:
    margin = y * _inner(np.asarray(w, dtype=float), x)
    if LossKind(kind) is LossKind.HINGE:
        return max(0.0, 1.0 - margin)
    return max(-margin, 0.0) + math.log1p(math.exp(-abs(margin)))


def capped_value(loss: float, rp: RobustParams) -> float:
    if loss < 0:
        raise ValueError("loss must be nonnegative")
    return min(loss ** rp.p, rp.xi)


def capped_lp_weight(loss: float, rp: RobustParams) -> float:
    """Supergradient of ``min(u**p, xi)`` at ``u = loss``.

    Zero once ``loss**p`` exceeds the cap (the example is treated as an
    outlier). Below the cap the loss is floored at ``gamma_clamp_eps``.
    """
    if loss < 0:
        raise ValueError("loss must be nonnegative")
    if loss ** rp.p > rp.xi:
        return 0.0
    return rp.p * max(loss, rp.gamma_clamp_eps) ** (rp.p - 1.0)


def concave_dual(gamma, rp: RobustParams, regime: str | None = None):
    """Concave conjugate ``h*(gamma) = inf_{u>0} [gamma*u - min(u**p, xi)]``.

    ``regime`` picks a branch explicitly: ``"below_cap"`` gives
    ``((p-1)/p) * p**(1/(1-p)) * gamma**(p/(p-1))`` and ``"at_cap"`` gives
    ``gamma * xi**(1/p) - xi``. With ``regime=None`` the branch is chosen
    by where the minimizing ``u`` falls, giving the infimum itself.
    Accepts a scalar (returns a float) or an array of weights.
    """
    if regime not in (None, "below_cap", "at_cap"):
        raise ValueError(f"unknown regime {regime!r}")
    g = np.asarray(gamma, dtype=float)
    if np.any(~(g > 0)):
        raise ValueError("gamma must be positive")
    p, xi = rp.p, rp.xi
    below = ((p - 1.0) / p) * p ** (1.0 / (1.0 - p)) * g ** (p / (p - 1.0))
    at_cap = g * xi ** (1.0 / p) - xi
    if regime == "below_cap":
        out = below
    elif regime == "at_cap":
        out = at_cap
    else:
        # stationary point of gamma*u - u**p; inside the cap only for large gamma
        u_star = (g / p) ** (1.0 / (p - 1.0))
        out = np.where(u_star ** p < xi, below, at_cap)
    return float(out) if out.ndim == 0 else out
