"""Multi-task streams: sparse-text ingestion, synthetic low-rank tasks, label noise.

Data files hold one example per line::

    <label> <idx>:<val> <idx>:<val> ...

with labels in {-1, +1} and 1-based feature indices. A manifest lists one
data file per line (paths relative to the manifest); ``#`` starts a comment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .linalg import SparseVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example:
    x: SparseVector
    y: int
    was_flipped: bool = False


@dataclass(frozen=True)
class MultiTaskStream:
    tasks: tuple[tuple[Example, ...], ...]
    dim: int
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("stream has no tasks")
        for i, task in enumerate(self.tasks):
            if not task:
                raise ValueError(f"task {i} is empty")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"task{i}" for i in range(len(self.tasks))))

    @property
    def m(self) -> int:
        return len(self.tasks)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.tasks)

    def dense_task(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Features (n x d) and labels of task ``i``."""
        task = self.tasks[i]
        X = np.zeros((len(task), self.dim))
        for k, ex in enumerate(task):
            X[k, ex.x.indices] = ex.x.values
        y = np.array([ex.y for ex in task], dtype=float)
        return X, y


class DataFormatError(ValueError):
    pass


def parse_line(line: str, where: str = "<string>", dim: int | None = None):
    """Parse one sparse line into ``(label, indices0, values)``."""
    parts = line.split()
    if not parts:
        raise DataFormatError(f"{where}: empty example line")
    try:
        label = int(parts[0])
    except ValueError:
        raise DataFormatError(f"{where}: bad label {parts[0]!r}") from None
    if label not in (-1, 1):
        raise DataFormatError(f"{where}: label must be -1 or +1, got {parts[0]!r}")
    idx, val = [], []
    for tok in parts[1:]:
        i, sep, v = tok.partition(":")
        try:
            k = int(i)
            x = float(v)
        except ValueError:
            raise DataFormatError(f"{where}: bad feature token {tok!r}") from None
        if not sep or k < 1:
            raise DataFormatError(f"{where}: bad feature token {tok!r}")
        if not np.isfinite(x):
            raise DataFormatError(f"{where}: non-finite value in {tok!r}")
        if dim is not None and k > dim:
            raise DataFormatError(f"{where}: index {k} exceeds dimension {dim}")
        idx.append(k - 1)
        val.append(x)
    if len(set(idx)) != len(idx):
        raise DataFormatError(f"{where}: repeated feature index")
    return label, np.array(idx, dtype=np.int64), np.array(val, dtype=float)


def read_task_file(path, dim: int | None = None):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rows.append(parse_line(line, f"{path}:{lineno}", dim))
    if not rows:
        raise DataFormatError(f"{path}: task file has no examples")
    return rows


def load_manifest(path, dim: int | None = None) -> MultiTaskStream:
    """Load every task file listed in the manifest at ``path``.

    ``dim`` defaults to the largest feature index seen across all tasks.
    """
    path = Path(path)
    base = path.parent
    files = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            entry = line.split("#", 1)[0].strip()
            if entry:
                files.append(base / entry)
    if not files:
        raise DataFormatError(f"{path}: manifest lists no task files")
    raw = [read_task_file(f, dim) for f in files]
    if dim is None:
        dim = max((int(idx.max()) + 1 for rows in raw for _, idx, _ in rows if idx.size), default=1)
    tasks = tuple(
        tuple(Example(SparseVector(idx, val, dim), label) for label, idx, val in rows)
        for rows in raw
    )
    return MultiTaskStream(tasks, dim, tuple(f.stem for f in files))


def format_value(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def format_example(ex: Example) -> str:
    toks = [f"{ex.y:+d}"]
    toks += [f"{int(i) + 1}:{format_value(v)}" for i, v in zip(ex.x.indices, ex.x.values)]
    return " ".join(toks)


def write_stream(stream: MultiTaskStream, directory, manifest_name: str = "manifest.txt") -> Path:
    """Write one data file per task plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, task in zip(stream.names, stream.tasks):
        fname = f"{name}.txt"
        with open(directory / fname, "w", encoding="utf-8", newline="\n") as fh:
            for ex in task:
                fh.write(format_example(ex) + "\n")
        lines.append(fname)
    manifest = directory / manifest_name
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {stream.m} tasks, dim {stream.dim}\n")
        fh.write("\n".join(lines) + "\n")
    return manifest


@dataclass(frozen=True)
class SynthSpec:
    m: int = 8
    d: int = 32
    rank: int = 2
    n: int = 500
    margin_scale: float = 0.1
    seed: int = 0
    feature_scale: float | None = None

    def __post_init__(self):
        if min(self.m, self.d, self.n) < 1:
            raise ValueError("m, d and n must be positive")
        if not 1 <= self.rank <= min(self.d, self.m):
            raise ValueError(f"rank must lie in [1, min(d, m)] = [1, {min(self.d, self.m)}]")
        if self.margin_scale < 0:
            raise ValueError("margin_scale must be nonnegative")


def generate_synthetic(spec: SynthSpec):
    """Low-rank task matrix and a separable stream per task.

    ``W_true = L @ R.T`` with Gaussian factors, columns rescaled to unit
    norm. Features are Gaussian with standard deviation ``feature_scale``
    (default ``1/sqrt(d)``, so ``||x||`` is about 1); labels are
    ``sign(<w_true, x>)`` and draws with ``|<w_true, x>| < margin_scale``
    are rejected.
    """
    rng = np.random.default_rng(spec.seed)
    L = rng.standard_normal((spec.d, spec.rank))
    R = rng.standard_normal((spec.m, spec.rank))
    W = L @ R.T
    W /= np.linalg.norm(W, axis=0, keepdims=True)
    scale = spec.feature_scale if spec.feature_scale is not None else 1.0 / np.sqrt(spec.d)
    all_idx = np.arange(spec.d, dtype=np.int64)
    tasks = []
    for i in range(spec.m):
        out = []
        while len(out) < spec.n:
            X = rng.standard_normal((2 * spec.n, spec.d)) * scale
            s = X @ W[:, i]
            for x, si in zip(X, s):
                if abs(si) < spec.margin_scale:
                    continue
                out.append(Example(SparseVector(all_idx, x, spec.d), 1 if si > 0 else -1))
                if len(out) == spec.n:
                    break
        tasks.append(tuple(out))
    return MultiTaskStream(tuple(tasks), spec.d), W


def inject_label_noise(stream: MultiTaskStream, prob: float, seed: int,
                       per_task: dict[int, float] | None = None) -> MultiTaskStream:
    """Flip each label independently with probability ``prob``.

    ``per_task`` overrides the probability for selected task indices.
    Flipping toggles ``was_flipped`` relative to the incoming stream.
    """
    probs = [prob] * stream.m
    for i, q in (per_task or {}).items():
        probs[i] = q
    for q in probs:
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"noise probability must lie in [0, 1], got {q}")
    rng = np.random.default_rng(seed)
    tasks = []
    for q, task in zip(probs, stream.tasks):
        flips = rng.random(len(task)) < q
        tasks.append(tuple(
            replace(ex, y=-ex.y, was_flipped=not ex.was_flipped) if f else ex
            for ex, f in zip(task, flips)
        ))
    return replace(stream, tasks=tuple(tasks))


def round_schedule(stream: MultiTaskStream, rounds: int, seed: int) -> np.ndarray:
    """Sample index per (round, task): shape ``(rounds, m)``.

    Each task is walked in a seeded random order; a task that runs out is
    reshuffled and walked again.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    children = np.random.SeedSequence(seed).spawn(stream.m)
    out = np.empty((rounds, stream.m), dtype=np.int64)
    for i, (n, ss) in enumerate(zip(stream.counts, children)):
        rng = np.random.default_rng(ss)
        col = []
        passes = 0
        while len(col) < rounds:
            col.extend(rng.permutation(n).tolist())
            passes += 1
        if passes > 1:
            log.info("task %d (%d examples) wrapped %d times to cover %d rounds",
                     i, n, passes - 1, rounds)
        out[:, i] = col[:rounds]
    return out
