"""Round-based simulation of the centralized and decentralized protocols.

Workers are isolated state machines. They exchange :class:`Message` values
through a per-round router, and a barrier separates the local phase from the
sync phase. Every run is a deterministic function of the config and stream.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import linalg
from .data import Example, MultiTaskStream, format_value, round_schedule
from .losses import LossKind, capped_lp_weight, loss_and_subgradient, predict
from .optimizer import (HyperParams, WorkerState, central_step, drom_d_local_step,
                        drom_local_step, learning_rate)
from .topology import Topology, is_sync_round

log = logging.getLogger(__name__)

SERVER = -1
ALGORITHMS = ("drom", "drom_d", "local_baseline")

DUAL_UPLOAD = "dual_upload"
SPECTRAL_BROADCAST = "spectral_broadcast"


class StreamExhausted(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    """A dual vector (to the server or a neighbor) or a spectral reply."""

    kind: str
    src: int
    dst: int
    round: int
    payload_size: int
    payload: tuple = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class TaskRecord:
    sample: int
    prediction: int
    label: int
    loss: float
    gamma: float
    update_applied: bool
    sigma1: float | None = None


@dataclass(frozen=True)
class RoundTrace:
    t: int
    tasks: tuple[TaskRecord, ...]
    sync: bool
    broadcast_occurred: bool
    messages: tuple[Message, ...]
    sigma1: float | None
    skipped_broadcasts: int
    primal_norm: float
    dual_norm: float
    nuclear_norm_W: float | None = None
    svd_iterations: int = 0  # power-iteration steps spent on this round's spectral step(s)


@dataclass(frozen=True)
class SimConfig:
    algorithm: str = "drom"
    hp: HyperParams = field(default_factory=HyperParams)
    loss: LossKind = LossKind.HINGE
    rounds: int = 100
    seed: int = 0
    topo: Topology | None = None
    wrap: bool = True
    parallel: bool = False
    track_nuclear_norm: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.algorithm == "drom_d" and self.topo is None:
            raise ValueError("drom_d needs a topology")
        object.__setattr__(self, "loss", LossKind(self.loss))


class Worker:
    """One task's learner. Holds its primal/dual state and cached spectral column."""

    def __init__(self, task_id: int, d: int, hp: HyperParams, loss: LossKind):
        self.state = WorkerState.zeros(d, task_id)
        self.v_prev = None
        self.spectral = None  # last (sigma, u, v) this worker computed as a local server
        self.hp = hp
        self.loss = loss
        self.d = d

    @property
    def task_id(self) -> int:
        return self.state.task_id

    def _weigh(self, ex: Example):
        s = self.state
        pred = predict(s.w, ex.x)
        loss, grad = loss_and_subgradient(self.loss, s.w, ex.x, ex.y)
        gamma = capped_lp_weight(loss, self.hp.robust) if self.hp.reweight else 1.0
        return pred, loss, grad, gamma

    def drom_round(self, t: int, eta: float, sample: int, ex: Example):
        pred, loss, grad, gamma = self._weigh(ex)
        self.state = drom_local_step(self.state, grad, gamma, eta, self.hp.lam, self.hp.rho)
        applied = gamma > 0
        out = []
        if applied:
            out.append(Message(DUAL_UPLOAD, self.task_id, SERVER, t, self.d, (self.state.a,)))
        return TaskRecord(sample, pred, ex.y, loss, gamma, applied), out

    def drom_d_round(self, t: int, eta: float, sample: int, ex: Example):
        pred, loss, grad, gamma = self._weigh(ex)
        self.state = drom_d_local_step(self.state, grad, gamma, eta, self.hp.lam, self.hp.rho)
        return TaskRecord(sample, pred, ex.y, loss, gamma, True)

    def local_round(self, t: int, eta: float, sample: int, ex: Example):
        s = self.state
        pred = predict(s.w, ex.x)
        loss, grad = loss_and_subgradient(self.loss, s.w, ex.x, ex.y)
        self.state = replace(s, w=s.w - eta * grad)
        return TaskRecord(sample, pred, ex.y, loss, 1.0, True)

    def share_dual(self, t: int, neighbors: Iterable[int]) -> list[Message]:
        return [Message(DUAL_UPLOAD, self.task_id, int(j), t, self.d, (self.state.a,))
                for j in neighbors]

    def receive_spectral(self, msg: Message | None) -> None:
        """Install ``u * [v]_i`` from a reply; ``None`` means an implicit zero."""
        if msg is None:
            uv = np.zeros(self.d)
        else:
            u, v_i = msg.payload
            uv = u * v_i
        self.state = replace(self.state, uv_col=uv)

    def local_server(self, t: int, inbox: Sequence[Message], m: int):
        """Aggregate own and neighbor duals, then cache the spectral column."""
        A = np.zeros((self.d, m))
        A[:, self.task_id] = self.state.a
        for msg in inbox:
            A[:, msg.src] = msg.payload[0]
        step = central_step(A, self.v_prev, self.hp.svd_tol, self.hp.svd_max_iter)
        self.v_prev = step.v
        self.spectral = (step.sigma, step.u, step.v)
        if step.fires:
            uv = step.u * step.v[self.task_id]
        else:
            uv = np.zeros(self.d)
        self.state = replace(self.state, uv_col=uv)
        return step.sigma, step.fires, step.iterations


class Server:
    """Central reducer: keeps the last uploaded dual of every worker."""

    def __init__(self, d: int, m: int, hp: HyperParams):
        self.A = np.zeros((d, m))
        self.v_prev = None
        self.hp = hp
        self.d = d
        self.m = m

    def reduce(self, t: int, inbox: Sequence[Message]):
        for msg in sorted(inbox, key=lambda msg: msg.src):
            self.A[:, msg.src] = msg.payload[0]
        step = central_step(self.A, self.v_prev, self.hp.svd_tol, self.hp.svd_max_iter)
        self.v_prev = step.v
        if not step.fires:
            return step.sigma, [], step.iterations
        u, v = step.u, step.v
        replies = [Message(SPECTRAL_BROADCAST, SERVER, i, t, self.d + 1, (u, v[i]))
                   for i in range(self.m)]
        return step.sigma, replies, step.iterations


def _schedule(cfg: SimConfig, stream: MultiTaskStream) -> np.ndarray:
    if not cfg.wrap:
        short = [f"{stream.names[i]} ({n} < {cfg.rounds})"
                 for i, n in enumerate(stream.counts) if n < cfg.rounds]
        if short:
            raise StreamExhausted("stream exhausted before the last round: " + ", ".join(short))
    return round_schedule(stream, cfg.rounds, cfg.seed)


class _Runner:
    def __init__(self, cfg: SimConfig, stream: MultiTaskStream):
        self.cfg = cfg
        self.stream = stream
        self.schedule = _schedule(cfg, stream)
        self.workers = [Worker(i, stream.dim, cfg.hp, cfg.loss) for i in range(stream.m)]
        self.pool = ThreadPoolExecutor(max_workers=stream.m) if cfg.parallel else None

    def map_workers(self, fn):
        if self.pool is None:
            return [fn(wk) for wk in self.workers]
        return list(self.pool.map(fn, self.workers))

    def example(self, t: int, i: int):
        sample = int(self.schedule[t - 1, i])
        return sample, self.stream.tasks[i][sample]

    def diagnostics(self):
        W = np.column_stack([wk.state.w for wk in self.workers])
        A = np.column_stack([wk.state.a for wk in self.workers])
        pn = float(np.linalg.norm(W, axis=0).max())
        dn = float(np.linalg.norm(A, axis=0).max())
        nn = linalg.nuclear_norm(W) if self.cfg.track_nuclear_norm else None
        return pn, dn, nn

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def iter_centralized(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> Iterator[RoundTrace]:
    """Worker/server protocol with a central spectral step every round."""
    if cfg.algorithm != "drom":
        raise ValueError("run_centralized expects algorithm 'drom'")
    run = _Runner(cfg, stream)
    server = Server(stream.dim, stream.m, cfg.hp)
    try:
        for t in range(1, cfg.rounds + 1):
            eta = learning_rate(t)
            results = run.map_workers(lambda wk: wk.drom_round(t, eta, *run.example(t, wk.task_id)))
            uploads = [msg for _, out in results for msg in out]
            sigma, replies, iters = server.reduce(t, uploads)
            by_dst = {msg.dst: msg for msg in replies}
            for wk in run.workers:
                wk.receive_spectral(by_dst.get(wk.task_id))
            records = tuple(replace(rec, sigma1=sigma) for rec, _ in results)
            pn, dn, nn = run.diagnostics()
            if observer is not None:
                observer(t, run.workers)
            yield RoundTrace(t, records, True, bool(replies), tuple(uploads + replies),
                             sigma, 0 if replies else 1, pn, dn, nn, iters)
    finally:
        run.close()


def iter_decentralized(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> Iterator[RoundTrace]:
    """Neighbor-only periodic synchronization over ``cfg.topo``.

    Between sync rounds each worker reuses the spectral column it computed
    at the last sync.
    """
    if cfg.algorithm != "drom_d":
        raise ValueError("run_decentralized expects algorithm 'drom_d'")
    topo = cfg.topo
    if topo.m != stream.m:
        raise ValueError(f"topology has {topo.m} nodes but the stream has {stream.m} tasks")
    run = _Runner(cfg, stream)
    try:
        for t in range(1, cfg.rounds + 1):
            eta = learning_rate(t, topo.tau)
            records = run.map_workers(lambda wk: wk.drom_d_round(t, eta, *run.example(t, wk.task_id)))
            messages: list[Message] = []
            sigma_max = None
            fired = iters = 0
            sync = is_sync_round(topo, t)
            if sync:
                for wk in run.workers:
                    messages.extend(wk.share_dual(t, topo.neighbors(wk.task_id)))
                inbox: dict[int, list[Message]] = {i: [] for i in range(stream.m)}
                for msg in messages:
                    inbox[msg.dst].append(msg)
                # all shares are sent before any worker aggregates (barrier)
                out = run.map_workers(lambda wk: wk.local_server(t, inbox[wk.task_id], stream.m))
                records = [replace(rec, sigma1=s) for rec, (s, _, _) in zip(records, out)]
                fired = sum(f for _, f, _ in out)
                iters = sum(k for _, _, k in out)
                sigma_max = max(s for s, _, _ in out)
            pn, dn, nn = run.diagnostics()
            if observer is not None:
                observer(t, run.workers)
            yield RoundTrace(t, tuple(records), sync, fired > 0, tuple(messages),
                             sigma_max, (stream.m - fired) if sync else 0, pn, dn, nn, iters)
    finally:
        run.close()


def iter_local_baseline(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> Iterator[RoundTrace]:
    """Independent online subgradient descent per task, no communication."""
    if cfg.algorithm != "local_baseline":
        raise ValueError("run_local_baseline expects algorithm 'local_baseline'")
    run = _Runner(cfg, stream)
    try:
        for t in range(1, cfg.rounds + 1):
            eta = learning_rate(t)
            records = run.map_workers(lambda wk: wk.local_round(t, eta, *run.example(t, wk.task_id)))
            pn, dn, nn = run.diagnostics()
            if observer is not None:
                observer(t, run.workers)
            yield RoundTrace(t, tuple(records), False, False, (), None, 0, pn, dn, nn)
    finally:
        run.close()


def run_centralized(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> list[RoundTrace]:
    return list(iter_centralized(cfg, stream, observer))


def run_decentralized(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> list[RoundTrace]:
    return list(iter_decentralized(cfg, stream, observer))


def run_local_baseline(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> list[RoundTrace]:
    return list(iter_local_baseline(cfg, stream, observer))


def iter_run(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> Iterator[RoundTrace]:
    """Rounds of the configured algorithm, one trace at a time.

    ``observer(t, workers)``, if given, is called after every round with the
    live :class:`Worker` objects (read-only use intended).
    """
    return {
        "drom": iter_centralized,
        "drom_d": iter_decentralized,
        "local_baseline": iter_local_baseline,
    }[cfg.algorithm](cfg, stream, observer)


def run(cfg: SimConfig, stream: MultiTaskStream, observer=None) -> list[RoundTrace]:
    return list(iter_run(cfg, stream, observer))


def communication_summary(traces: Sequence[RoundTrace]) -> dict:
    msgs = [msg for tr in traces for msg in tr.messages]
    return {
        "total_messages": len(msgs),
        "total_reals_transferred": sum(msg.payload_size for msg in msgs),
        "sync_rounds": sum(1 for tr in traces if tr.sync),
        "skipped_broadcasts": sum(tr.skipped_broadcasts for tr in traces),
    }


def idle_time(costs, adjacency, tau: int, latency: float = 0.0) -> np.ndarray:
    """Per-worker barrier wait under periodic neighbor synchronization.

    ``costs[t, i]`` is worker ``i``'s compute time in round ``t + 1``. On a
    sync round a worker waits until every neighbor has finished that round,
    then pays ``latency`` for the exchange. Idle time is final clock minus
    own compute. ``adjacency = ones, tau = 1`` is the fully synchronous case.
    """
    costs = np.asarray(costs, dtype=float)
    S = np.asarray(adjacency) != 0
    T, m = costs.shape
    clock = np.zeros(m)
    for t in range(1, T + 1):
        clock = clock + costs[t - 1]
        if t % tau == 0:
            clock = np.array([clock[S[i]].max() for i in range(m)]) + latency
    return clock - costs.sum(axis=0)


TRACE_COLUMNS = ("t", "task", "loss", "gamma", "prediction", "label",
                 "update_applied", "sigma1", "msgs_in", "msgs_out")


def _num(x) -> str:
    return "" if x is None else format_value(x)


def trace_rows(traces: Sequence[RoundTrace]):
    for tr in traces:
        m = len(tr.tasks)
        msgs_in = [0] * m
        msgs_out = [0] * m
        for msg in tr.messages:
            if msg.src != SERVER:
                msgs_out[msg.src] += 1
            if msg.dst != SERVER:
                msgs_in[msg.dst] += 1
        for i, rec in enumerate(tr.tasks):
            yield (tr.t, i, _num(rec.loss), _num(rec.gamma), rec.prediction, rec.label,
                   int(rec.update_applied), _num(rec.sigma1), msgs_in[i], msgs_out[i])


def write_trace_csv(traces: Sequence[RoundTrace], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(trace_rows(traces))


def trace_csv(traces: Sequence[RoundTrace]) -> str:
    buf = io.StringIO()
    write_trace_csv(traces, buf)
    return buf.getvalue()
