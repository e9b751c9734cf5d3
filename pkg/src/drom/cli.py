"""Experiment runner.

``drom run CONFIG`` simulates one configured experiment per seed and writes
``trace_<seed>.csv``, ``metrics_<seed>.csv`` and ``summary.csv``.
``drom synth`` writes a synthetic low-rank task set as sparse text files.
``drom report DIR`` averages the metrics files of a run directory.

Configs are INI files::

    [run]
    algorithm = drom          ; drom | drom_d | local_baseline
    loss = hinge
    rounds = 500
    seeds = 1, 2, 3
    noise = 0.1

    [data]
    m = 8                     ; synthetic set, or: manifest = tasks/manifest.txt
    d = 32
    rank = 2

    [topology]
    kind = ring
    tau = 20

    [robust]
    p = 0.5
    xi = 1

``p``, ``xi`` and ``tau`` have no defaults. Exit status is 0 on success,
2 for a bad config or invocation and 3 when a run fails.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, simnet
from .data import (DataFormatError, MultiTaskStream, SynthSpec, format_value,
                   generate_synthetic, inject_label_noise, load_manifest, write_stream)
from .linalg import ConvergenceError
from .losses import LossKind, RobustParams
from .optimizer import CENTRAL_MAX_ITER, CENTRAL_TOL, HyperParams
from .topology import KINDS, build_topology

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

NOISE_STREAM = 1
SUMMARY_METRICS = ("cum_error_rate", "f1_micro", "f1_macro", "regret",
                   "total_messages", "total_reals_transferred", "sync_rounds",
                   "skipped_broadcasts")


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_seeds(s: str) -> tuple[int, ...]:
    seeds = tuple(int(tok) for tok in re.split(r"[,\s]+", s.strip()) if tok)
    if not seeds:
        raise ValueError("seeds must list at least one integer")
    if any(x < 0 for x in seeds):
        raise ValueError("seeds must be nonnegative")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds


def _parse_opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "default") else float(s)


def _positive(conv):
    def parse(s):
        x = conv(s)
        if not x > 0:
            raise ValueError(f"must be positive, got {s!r}")
        return x
    return parse


def _choice(options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"unknown value {v!r}, choose from {', '.join(options)}")
        return v
    return parse


def _probability(s: str) -> float:
    x = float(s)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"must lie in [0, 1], got {s!r}")
    return x


# (section, key) -> (parser, default); REQUIRED marks keys without a default
REQUIRED = object()
SCHEMA = {
    "run": {
        "algorithm": (_choice(simnet.ALGORITHMS), "drom"),
        "loss": (_choice(tuple(k.value for k in LossKind)), "hinge"),
        "rounds": (_positive(int), 100),
        "seeds": (_parse_seeds, (0,)),
        "noise": (_probability, 0.0),
        "wrap": (_parse_bool, True),
        "parallel_workers": (_parse_bool, False),
        "out": (str, "results"),
    },
    "data": {
        "manifest": (str, None),
        "dim": (_positive(int), None),
        "m": (_positive(int), 8),
        "d": (_positive(int), 32),
        "rank": (_positive(int), 2),
        "n": (_positive(int), 500),
        "margin_scale": (float, 0.1),
        "feature_scale": (_parse_opt_float, None),
        "seed": (int, None),
    },
    "topology": {
        "kind": (_choice(KINDS), "full"),
        "tau": (_positive(int), REQUIRED),
    },
    "robust": {
        "p": (float, REQUIRED),
        "xi": (float, REQUIRED),
        "gamma_clamp_eps": (float, 1e-3),
        "reweight": (_parse_bool, True),
    },
    "optimizer": {
        "lam": (float, 1.0),
        "rho": (float, 1.0),
        "svd_tol": (_positive(float), CENTRAL_TOL),
        "svd_max_iter": (_positive(int), CENTRAL_MAX_ITER),
    },
    "metrics": {
        "regret": (_parse_bool, True),
        "comparator_budget": (_positive(int), 2000),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    loss: str
    rounds: int
    seeds: tuple[int, ...]
    noise: float
    out: Path
    topology: str
    tau: int
    hp: HyperParams
    manifest: Path | None = None
    dim: int | None = None
    synth: SynthSpec | None = None
    synth_seed: int | None = None
    wrap: bool = True
    parallel_workers: bool = False
    regret: bool = True
    comparator_budget: int = 2000
    source: str = field(default="<config>", compare=False)


def _key_lines(text: str) -> dict:
    """Line number of every section header and ``key = value`` line."""
    lines = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), lineno)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = lineno
    return lines


def load_config(path, overrides=(), seed: int | None = None, out=None) -> ExperimentConfig:
    """Parse and validate an experiment config.

    ``overrides`` are ``section.key=value`` strings applied on top of the
    file. Every error message names the file line (or the override) and the
    offending field.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror or e}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"{path}:{lineno}: cannot parse line {line.strip()!r}") from None
    except configparser.Error as e:
        msg = getattr(e, "message", str(e)).splitlines()[0]
        lineno = getattr(e, "lineno", None)
        where = f"{path}:{lineno}" if lineno else str(path)
        raise ConfigError(f"{where}: {msg}") from None
    key_lines = _key_lines(text)

    raw: dict[tuple[str, str], tuple[str, str]] = {}
    for section in parser.sections():
        where = f"{path}:{key_lines.get((section, None), '?')}"
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        for key, value in parser.items(section):
            where = f"{path}:{key_lines.get((section, key), '?')}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown field {section}.{key}")
            raw[(section, key)] = (value, where)
    for ov in overrides:
        name, sep, value = ov.partition("=")
        section, dot, key = name.strip().partition(".")
        key = key.strip().lower()
        where = f"--override {ov}"
        if not sep or not dot:
            raise ConfigError(f"{where}: expected section.key=value")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown field {section}.{key}")
        raw[(section, key)] = (value.strip(), where)

    values = {}
    for section, fields in SCHEMA.items():
        for key, (conv, default) in fields.items():
            if (section, key) in raw:
                value, where = raw[(section, key)]
                try:
                    values[(section, key)] = conv(value)
                except ValueError as e:
                    raise ConfigError(f"{where}: {section}.{key}: {e}") from None
            elif default is REQUIRED:
                sec_line = key_lines.get((section, None))
                where = f"{path}:{sec_line}" if sec_line else str(path)
                raise ConfigError(f"{where}: missing required field {section}.{key}")
            else:
                values[(section, key)] = default

    def fail(section, key, msg):
        where = raw.get((section, key), (None, str(path)))[1]
        raise ConfigError(f"{where}: {section}.{key}: {msg}")

    p, xi, eps = (values[("robust", k)] for k in ("p", "xi", "gamma_clamp_eps"))
    if not 0.0 < p < 1.0:
        fail("robust", "p", f"must lie in (0, 1), got {p}")
    if not xi > 0:
        fail("robust", "xi", f"must be positive, got {xi}")
    if not eps > 0:
        fail("robust", "gamma_clamp_eps", f"must be positive, got {eps}")
    rp = RobustParams(p, xi, eps)
    for key in ("lam", "rho"):
        if not values[("optimizer", key)] > 0:
            fail("optimizer", key, "must be positive")
    hp = HyperParams(values[("optimizer", "lam")], values[("optimizer", "rho")], rp,
                     values[("robust", "reweight")], values[("optimizer", "svd_tol")],
                     values[("optimizer", "svd_max_iter")])

    manifest = values[("data", "manifest")]
    synth = None
    if manifest is not None:
        manifest = Path(manifest)
        if not manifest.is_absolute():
            manifest = path.parent / manifest
        if not manifest.is_file():
            fail("data", "manifest", f"no such file {str(manifest)!r}")
    else:
        m, d, rank = (values[("data", k)] for k in ("m", "d", "rank"))
        if rank > min(m, d):
            fail("data", "rank", f"must lie in [1, min(d, m)] = [1, {min(m, d)}]")
        if values[("data", "margin_scale")] < 0:
            fail("data", "margin_scale", "must be nonnegative")
        fs = values[("data", "feature_scale")]
        if fs is not None and not fs > 0:
            fail("data", "feature_scale", "must be positive")
        synth = SynthSpec(m, d, rank, values[("data", "n")], values[("data", "margin_scale")], 0, fs)

    seeds = values[("run", "seeds")] if seed is None else (seed,)
    out_dir = Path(out) if out is not None else Path(values[("run", "out")])
    return ExperimentConfig(
        algorithm=values[("run", "algorithm")], loss=values[("run", "loss")],
        rounds=values[("run", "rounds")], seeds=seeds, noise=values[("run", "noise")],
        out=out_dir, topology=values[("topology", "kind")], tau=values[("topology", "tau")],
        hp=hp, manifest=manifest, dim=values[("data", "dim")], synth=synth,
        synth_seed=values[("data", "seed")], wrap=values[("run", "wrap")],
        parallel_workers=values[("run", "parallel_workers")],
        regret=values[("metrics", "regret")],
        comparator_budget=values[("metrics", "comparator_budget")], source=str(path))


# -- running ------------------------------------------------------------------

def derived_seed(seed: int, stream_id: int) -> int:
    """Independent child seed of a run seed, for a named randomness stream."""
    return int(np.random.SeedSequence([seed, stream_id]).generate_state(1)[0])


def build_stream(cfg: ExperimentConfig, seed: int) -> MultiTaskStream:
    if cfg.manifest is not None:
        stream = load_manifest(cfg.manifest, cfg.dim)
    else:
        data_seed = seed if cfg.synth_seed is None else cfg.synth_seed
        spec = SynthSpec(**{**cfg.synth.__dict__, "seed": data_seed})
        stream, _ = generate_synthetic(spec)
    if cfg.noise > 0:
        stream = inject_label_noise(stream, cfg.noise, derived_seed(seed, NOISE_STREAM))
    return stream


def sim_config(cfg: ExperimentConfig, m: int, seed: int) -> simnet.SimConfig:
    topo = build_topology(cfg.topology, m, cfg.tau) if cfg.algorithm == "drom_d" else None
    return simnet.SimConfig(algorithm=cfg.algorithm, hp=cfg.hp, loss=cfg.loss,
                            rounds=cfg.rounds, seed=seed, topo=topo, wrap=cfg.wrap,
                            parallel=cfg.parallel_workers)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, int, np.integer)):
        return str(int(x))
    return format_value(x)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Simulate one seed; writes its trace and metrics files into ``cfg.out``.

    While the simulation runs the trace goes to ``trace_<seed>.csv.partial``;
    it is renamed only once the seed has finished, so a failed run leaves the
    partial file behind.
    """
    stream = build_stream(cfg, seed)
    sc = sim_config(cfg, stream.m, seed)
    trace_path = cfg.out / f"trace_{seed}.csv"
    partial = trace_path.with_name(trace_path.name + ".partial")
    traces = []
    with open(partial, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(simnet.TRACE_COLUMNS)
        for tr in simnet.iter_run(sc, stream):
            traces.append(tr)
            writer.writerows(simnet.trace_rows([tr]))
    if not all(math.isfinite(tr.primal_norm) and math.isfinite(tr.dual_norm) for tr in traces):
        raise FloatingPointError("model state became non-finite")

    loss = LossKind(cfg.loss)
    regret = None
    if cfg.regret:
        try:
            counts = metrics.sample_counts(traces, stream)
            comp = metrics.offline_comparator(stream, cfg.hp, cfg.comparator_budget, loss, counts)
            regret = metrics.empirical_regret(traces, comp.W, stream, loss)
        except metrics.ComparatorTooLarge as e:
            log.warning("seed %d: regret skipped: %s", seed, e)
    bp = metrics.run_bound_params(traces, stream, cfg.hp, cfg.tau)
    rows = metrics.metrics_table(traces, bp, cfg.hp, regret)
    metrics_path = cfg.out / f"metrics_{seed}.csv"
    _write_rows(metrics_path, metrics.METRICS_COLUMNS, rows)
    partial.replace(trace_path)

    final = rows[-1]
    summary = dict(zip(metrics.METRICS_COLUMNS, final))
    summary.update(simnet.communication_summary(traces))
    return summary


def write_summary(path: Path, per_seed: dict) -> None:
    rows = []
    for name in SUMMARY_METRICS:
        vals = [s[name] for s in per_seed.values() if s.get(name) is not None]
        if not vals:
            rows.append((name, None, None, 0))
            continue
        arr = np.asarray(vals, dtype=float)
        rows.append((name, float(arr.mean()), float(arr.std()), len(vals)))
    _write_rows(path, ("metric", "mean", "std", "n_seeds"), rows)


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


RUNTIME_ERRORS = (ArithmeticError, ValueError, ConvergenceError, simnet.StreamExhausted)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    cfg.out.mkdir(parents=True, exist_ok=True)
    per_seed = {}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            if args.parallel and len(cfg.seeds) > 1:
                with ProcessPoolExecutor(max_workers=min(len(cfg.seeds), args.jobs or 4)) as pool:
                    results = list(pool.map(_run_seed_job, [(cfg, s) for s in cfg.seeds]))
                per_seed = dict(zip(cfg.seeds, results))
            else:
                for seed in cfg.seeds:
                    per_seed[seed] = run_seed(cfg, seed)
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as e:
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_summary(cfg.out / "summary.csv", per_seed)
    log.info("wrote %d seed(s) to %s", len(per_seed), cfg.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(args.m, args.d, args.rank, args.n, args.margin_scale, args.seed,
                         args.feature_scale)
        if not 0.0 <= args.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
    except ValueError as e:
        print(f"invalid synthetic spec: {e}", file=sys.stderr)
        return EXIT_CONFIG
    stream, W = generate_synthetic(spec)
    if args.noise > 0:
        stream = inject_label_noise(stream, args.noise, derived_seed(args.seed, NOISE_STREAM))
    out = Path(args.out)
    write_stream(stream, out)
    _write_rows(out / "w_true.csv", stream.names, W.tolist())
    return EXIT_OK


def _read_metrics(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not {"t", "cum_error_rate"} <= set(rows[0]):
        raise ValueError(f"{path}: not a metrics file")
    header = rows[0]
    cols = {name: [] for name in header}
    for row in rows[1:]:
        for name, cell in zip(header, row):
            cols[name].append(float(cell) if cell != "" else math.nan)
    return {name: np.array(v) for name, v in cols.items()}


def cmd_report(args) -> int:
    run_dir = Path(args.dir)
    files = sorted(run_dir.glob("metrics_*.csv"),
                   key=lambda p: (len(p.stem), p.stem)) if run_dir.is_dir() else []
    if not files:
        print(f"no metrics_*.csv files in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        runs = [_read_metrics(f) for f in files]
    except (OSError, ValueError) as e:
        print(f"cannot read metrics: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    lengths = {len(r["t"]) for r in runs}
    if len(lengths) != 1:
        print("metrics files cover different numbers of rounds", file=sys.stderr)
        return EXIT_RUNTIME
    t = runs[0]["t"]
    names = [c for c in ("cum_error_rate", "f1_micro", "f1_macro", "regret") if c in runs[0]]
    header = ["t"]
    columns = [t.astype(int)]
    for name in names:
        stack = np.vstack([r[name] for r in runs])
        header += [f"{name}_mean", f"{name}_std"]
        columns += [stack.mean(axis=0), stack.std(axis=0)]
    rows = [[int(columns[0][k])] + [None if math.isnan(c[k]) else float(c[k]) for c in columns[1:]]
            for k in range(len(t))]
    _write_rows(run_dir / "curves.csv", header, rows)

    with open(run_dir / "regret_slope.txt", "w", encoding="utf-8", newline="\n") as fh:
        try:
            R = np.vstack([r["regret"] for r in runs]).mean(axis=0)
            slope = metrics.loglog_slope(R, t)
            fh.write(format_value(slope) + "\n")
        except (KeyError, ValueError) as e:
            # regret missing or not positive over the fitted range
            fh.write("nan\n")
            log.warning("regret slope not fitted: %s", e)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drom", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="run only this seed")
    r.add_argument("--out", help="output directory (overrides run.out)")
    r.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    r.add_argument("--parallel", action="store_true", help="run seeds in parallel processes")
    r.add_argument("--jobs", type=int, default=None, help="process count for --parallel")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic low-rank task set")
    s.add_argument("--m", type=int, default=8, help="number of tasks")
    s.add_argument("--d", type=int, default=32, help="feature dimension")
    s.add_argument("--rank", type=int, default=2)
    s.add_argument("--n", type=int, default=500, help="examples per task")
    s.add_argument("--margin-scale", type=float, default=0.1)
    s.add_argument("--feature-scale", type=float, default=None)
    s.add_argument("--noise", type=float, default=0.0, help="label flip probability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="average the metrics of a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
