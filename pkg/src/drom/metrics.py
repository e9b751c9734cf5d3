"""Online evaluation: error rate, F1, comparator, empirical regret and bounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import MultiTaskStream
from .linalg import full_svd
from .losses import LossKind, loss_value
from .optimizer import BoundParams, HyperParams, regret_bound

log = logging.getLogger(__name__)


@dataclass
class ConfusionState:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def update(self, prediction: int, label: int) -> None:
        if label > 0:
            if prediction > 0:
                self.tp += 1
            else:
                self.fn += 1
        elif prediction > 0:
            self.fp += 1
        else:
            self.tn += 1


def cumulative_error_rate(cs: ConfusionState) -> float:
    if cs.n == 0:
        raise ValueError("no predictions recorded")
    return (cs.fp + cs.fn) / cs.n


def f1(cs: ConfusionState) -> float:
    """Harmonic mean of precision and recall; 0 when there are no true positives."""
    if cs.tp == 0:
        return 0.0
    prec = cs.tp / (cs.tp + cs.fp)
    rec = cs.tp / (cs.tp + cs.fn)
    return 2 * prec * rec / (prec + rec)


def confusion_curves(traces):
    """Per-round cumulative error rate, micro-F1 and macro-F1 over all tasks."""
    m = len(traces[0].tasks)
    pooled = ConfusionState()
    per_task = [ConfusionState() for _ in range(m)]
    err, micro, macro = [], [], []
    for tr in traces:
        for cs, rec in zip(per_task, tr.tasks):
            cs.update(rec.prediction, rec.label)
            pooled.update(rec.prediction, rec.label)
        err.append(cumulative_error_rate(pooled))
        micro.append(f1(pooled))
        macro.append(float(np.mean([f1(cs) for cs in per_task])))
    return np.array(err), np.array(micro), np.array(macro)


# -- comparator ---------------------------------------------------------------

def project_simplex_ball(s: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of nonnegative ``s`` onto ``{x >= 0, sum(x) <= radius}``."""
    s = np.maximum(s, 0.0)
    if s.sum() <= radius:
        return s
    if radius <= 0:
        return np.zeros_like(s)
    mu = np.sort(s)[::-1]
    css = np.cumsum(mu) - radius
    k = np.arange(1, len(s) + 1)
    rho = np.flatnonzero(mu - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(s - theta, 0.0)


def project_nuclear_ball(W: np.ndarray, radius: float) -> np.ndarray:
    U, s, V = full_svd(W)
    s2 = project_simplex_ball(s, radius)
    if np.array_equal(s2, s):
        return W
    return (U * s2) @ V.T


def sample_counts(traces, stream: MultiTaskStream) -> list[np.ndarray]:
    """How often each example of each task was played in ``traces``."""
    counts = [np.zeros(n) for n in stream.counts]
    for tr in traces:
        for i, rec in enumerate(tr.tasks):
            counts[i][rec.sample] += 1
    return counts


class ComparatorTooLarge(ValueError):
    """The instance is beyond the desk-scale comparator limits."""


@dataclass
class ComparatorResult:
    W: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: np.ndarray


def _objective_and_grad(W, data, loss: LossKind):
    total = 0.0
    G = np.zeros_like(W)
    for i, (X, y, c) in enumerate(data):
        z = y * (X @ W[:, i])
        if loss is LossKind.HINGE:
            viol = z < 1.0
            total += float(c[viol] @ (1.0 - z[viol]))
            G[:, i] = -X.T @ (c * y * viol)
        else:
            total += float(c @ np.logaddexp(0.0, -z))
            G[:, i] = -X.T @ (c * y * 0.5 * (1.0 - np.tanh(z / 2.0)))
    return total, G


def offline_comparator(stream: MultiTaskStream, hp: HyperParams, budget: int = 2000,
                       loss=LossKind.HINGE, counts=None, radius: float | None = None,
                       rel_tol: float = 1e-6) -> ComparatorResult:
    """Best fixed ``W`` in hindsight over the nuclear ball of radius ``rho/lam``.

    Full-batch projected subgradient descent with step ``radius / (||g|| sqrt(k))``.
    ``counts`` weights each example by how often it was played (default 1).
    Stops once the best objective improves by less than ``rel_tol`` (relative)
    over a window of 50 iterations; if ``budget`` runs out first,
    ``converged`` is False and a warning is logged.
    """
    loss = LossKind(loss)
    d, m = stream.dim, stream.m
    if d * m > 4096 or sum(stream.counts) > 50_000:
        raise ComparatorTooLarge("comparator is limited to d*m <= 4096 and 50k examples")
    radius = hp.nuclear_target if radius is None else radius
    data = []
    for i in range(m):
        X, y = stream.dense_task(i)
        c = np.ones(len(y)) if counts is None else np.asarray(counts[i], dtype=float)
        data.append((X, y, c))
    W = np.zeros((d, m))
    best_W, (best_f, G) = W, _objective_and_grad(W, data, loss)
    history = [best_f]
    converged = radius <= 0
    k = 0
    window = 50
    while not converged and k < budget:
        k += 1
        gn = np.linalg.norm(G)
        if gn == 0:
            converged = True
            break
        W = project_nuclear_ball(W - (radius / (gn * np.sqrt(k))) * G, radius)
        f, G = _objective_and_grad(W, data, loss)
        if f < best_f:
            best_f, best_W = f, W
        history.append(best_f)
        if k >= window:
            old = history[-window - 1]
            if old - best_f <= rel_tol * max(abs(old), 1e-12):
                converged = True
    if not converged:
        log.warning("comparator stopped at budget %d before reaching rel_tol %g", budget, rel_tol)
    return ComparatorResult(best_W, best_f, k, converged, np.array(history))


# -- regret -------------------------------------------------------------------

def empirical_regret(traces, W_star: np.ndarray, stream: MultiTaskStream, loss=LossKind.HINGE):
    """Cumulative ``sum_s F_s(W_s) - F_s(W_star)`` after every round."""
    loss = LossKind(loss)
    inc = np.empty(len(traces))
    for k, tr in enumerate(traces):
        if len(tr.tasks) != stream.m:
            raise ValueError(f"round {tr.t}: trace has {len(tr.tasks)} tasks, stream has {stream.m}")
        total = 0.0
        for i, rec in enumerate(tr.tasks):
            if rec.sample >= stream.counts[i]:
                raise ValueError(f"round {tr.t}, task {i}: sample {rec.sample} not in stream")
            ex = stream.tasks[i][rec.sample]
            if ex.y != rec.label:
                raise ValueError(f"round {tr.t}, task {i}: trace and stream labels disagree")
            total += rec.loss - loss_value(loss, W_star[:, i], ex.x, ex.y)
        inc[k] = total
    return np.cumsum(inc)


def loglog_slope(R, t=None, tail: float = 0.5) -> float:
    """Least-squares slope of ``log R`` against ``log t`` over the last ``tail`` of rounds."""
    R = np.asarray(R, dtype=float)
    t = np.arange(1, len(R) + 1) if t is None else np.asarray(t, dtype=float)
    start = int(len(R) * (1 - tail))
    R, t = R[start:], t[start:]
    if np.any(R <= 0):
        raise ValueError("regret must be positive on the fitted range")
    return float(np.polyfit(np.log(t), np.log(R), 1)[0])


def run_bound_params(traces, stream: MultiTaskStream, hp: HyperParams, tau: int = 1) -> BoundParams:
    """Bound constants measured from a run.

    ``D`` is twice the largest primal or dual column norm seen (a diameter
    bound), ``kappa`` the weight cap and ``beta`` the largest feature norm
    (the Lipschitz constant of hinge and logistic losses).
    """
    radius = max(max(tr.primal_norm, tr.dual_norm) for tr in traces)
    D = max(2.0 * radius, 1e-12)
    beta = max(ex.x.norm for task in stream.tasks for ex in task)
    kappa = hp.robust.kappa if hp.reweight else 1.0
    return BoundParams(D=D, kappa=kappa, beta=max(beta, 1e-12), m=stream.m, tau=tau)


def metrics_table(traces, bp: BoundParams, hp: HyperParams, regret=None):
    """Rows of ``t, cum_error_rate, f1_micro, regret, bound_thm1, bound_thm2, f1_macro``."""
    err, micro, macro = confusion_curves(traces)
    rows = []
    for k, tr in enumerate(traces):
        t = tr.t
        rows.append((
            t, err[k], micro[k],
            None if regret is None else float(regret[k]),
            regret_bound(bp, hp, t, "thm1"),
            regret_bound(bp, hp, t, "thm2"),
            macro[k],
        ))
    return rows


METRICS_COLUMNS = ("t", "cum_error_rate", "f1_micro", "regret", "bound_thm1", "bound_thm2", "f1_macro")
