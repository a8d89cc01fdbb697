"""Experiment runner: ``run``, ``sweep``, ``plot`` and ``report`` verbs.

Configuration comes from four layers, highest precedence first:

1. command-line flags (``--seed``, ``--out``, ``--mode``, ``--set key=value``),
2. environment variables ``PRD_<KEY>`` where nested keys are joined by a
   double underscore, e.g. ``PRD_TRAIN__LOSS__BETA=16``,
3. the YAML file given with ``--config``,
4. the dataclass defaults below.

Exit codes: 0 on success, 2 for an invalid config or unreadable input,
3 when training aborts on a non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import platform
import sys
import tempfile
import time
import uuid
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .encoder import BackboneSpec
from .errors import ConfigError, TrainingAborted
from .evalkit import (
    AccuracyMatrix,
    amca,
    avg_cumulative_incremental_accuracy,
    avg_observed_accuracy,
    forgetting,
    mean_stderr,
)
from .losses import LossConfig
from .stream import AugmentConfig, build_stream, load_dataset
from .trainer import TrainConfig, run_stream

log = logging.getLogger("prd")

ENV_PREFIX = "PRD_"
RECORD_VERSION = 1
MODES = ("task", "class", "domain")
EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


# ---------------------------------------------------------------- config


@dataclass
class StreamConfig:
    dataset: dict = field(default_factory=lambda: {"generator": "gaussian"})
    num_tasks: int = 5
    classes_per_task: int = 2
    domain_shift: float = 0.0


@dataclass
class RunConfig:
    name: str = "prd"
    stream: StreamConfig = field(default_factory=StreamConfig)
    backbone: dict = field(default_factory=dict)  # BackboneSpec fields; input_shape defaults to the data's
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "class"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    probe: bool = True
    out: str = "runs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if self.mode != "domain" and self.stream.domain_shift:
            raise ConfigError("stream.domain_shift: only meaningful with mode 'domain'")
        unknown = set(self.backbone) - {f.name for f in fields(BackboneSpec)}
        if unknown:
            raise ConfigError(f"backbone: unknown fields {sorted(unknown)}")

    def to_dict(self):
        return _plain(asdict(self))

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path=""):
    """Instantiate dataclass ``cls`` from nested dicts with field-level errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown field(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = NESTED.get((cls, name))
        where = f"{path}.{name}" if path else name
        kwargs[name] = _build(sub, value, where) if sub else value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}" if path else str(e)) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


NESTED = {
    (RunConfig, "stream"): StreamConfig,
    (RunConfig, "train"): TrainConfig,
    (TrainConfig, "loss"): LossConfig,
    (TrainConfig, "augment"): AugmentConfig,
}


def _set_path(d, dotted, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    cur[keys[-1]] = value


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_value(raw: str):
    """YAML scalar parsing that also accepts bare exponents such as ``1e-3``."""
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def env_overrides(environ=None):
    """Nested dict from ``PRD_SECTION__FIELD=value`` variables (values parsed as YAML)."""
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(out, path, parse_value(raw))
    return out


def load_config(path=None, flags=None, environ=None) -> RunConfig:
    """Resolve a RunConfig with precedence flag > env > file > default."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    data = _merge(data, env_overrides(environ))
    data = _merge(data, flags or {})
    return _build(RunConfig, data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def parse_config_text(text: str) -> RunConfig:
    return _build(RunConfig, yaml.safe_load(text) or {})


# ---------------------------------------------------------------- io helpers


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _versions():
    return {"prd": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


# ---------------------------------------------------------------- run


def resolve_seed(cfg: RunConfig, seed: int):
    """Dataset, stream, backbone spec and train config for one seed."""
    ref = dict(cfg.stream.dataset)
    if "path" not in ref:
        ref["seed"] = int(ref.get("seed", 0)) + seed
    dataset = load_dataset(ref)
    stream_mode = "domain" if cfg.mode == "domain" else "class"
    sessions = build_stream(dataset, cfg.stream.num_tasks, cfg.stream.classes_per_task, seed,
                            mode=stream_mode, domain_shift=cfg.stream.domain_shift)
    spec = BackboneSpec(**{"input_shape": dataset.input_shape, **cfg.backbone, "seed": seed})
    train = _build(TrainConfig, {**_plain(asdict(cfg.train)), "seed": seed}, "train")
    return dataset, sessions, spec, train


def final_metrics(matrix: AccuracyMatrix, phase_accuracy, class_accuracy, probe, mode="class"):
    # AMCA needs every class scored in every session, which only holds when sessions share classes
    return {
        "avg_observed_accuracy": avg_observed_accuracy(matrix),
        "forgetting": forgetting(matrix) if matrix.num_tasks > 1 else None,
        "avg_cumulative_incremental_accuracy": avg_cumulative_incremental_accuracy(phase_accuracy),
        "amca": amca(class_accuracy) if mode == "domain" and class_accuracy else None,
        "probe_task1": probe[-1] if probe else None,
    }


def run_one(cfg: RunConfig, seed: int) -> dict:
    """Train one seed and return its run record (not yet written)."""
    t0 = time.perf_counter()
    dataset, sessions, spec, train = resolve_seed(cfg, seed)
    res = run_stream(dataset, sessions, spec, train, mode=cfg.mode, probe=cfg.probe)
    class_acc = {str(t): {str(c): a for c, a in accs.items()} for t, accs in res.class_accuracy.items()}
    return {
        "version": RECORD_VERSION,
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seed": seed,
        "mode": cfg.mode,
        "matrix": res.matrix.rows,
        "phase_accuracy": res.phase_accuracy,
        "class_accuracy": class_acc,
        "diagnostics": res.diagnostics,
        "probe": res.probe,
        "proto_task1": res.proto_task1,
        "progress": res.state.progress,
        "prototypes": res.state.protos.to_record(),
        "metrics": final_metrics(res.matrix, res.phase_accuracy, res.class_accuracy, res.probe, cfg.mode),
        "wall_clock_s": time.perf_counter() - t0,
        "versions": _versions(),
    }


def _run_one_safe(args):
    cfg, seed = args
    try:
        return run_one(cfg, seed), None
    except TrainingAborted as e:
        return None, {"seed": seed, "message": str(e), "diagnostics": e.diagnostics}


METRIC_KEYS = ("avg_observed_accuracy", "forgetting", "avg_cumulative_incremental_accuracy", "amca", "probe_task1")


def aggregate(records) -> dict:
    """Mean and standard error over seeds of every final metric."""
    out = {"name": records[0]["name"], "config_hash": records[0]["config_hash"],
           "seeds": [r["seed"] for r in records], "metrics": {}}
    for k in METRIC_KEYS:
        vals = [r["metrics"][k] for r in records if r["metrics"].get(k) is not None]
        if vals:
            m, se = mean_stderr(vals)
            out["metrics"][k] = {"mean": m, "stderr": se, "n": len(vals)}
    return out


class RunFailed(Exception):
    def __init__(self, path):
        super().__init__(str(path))
        self.path = path


def execute(cfg: RunConfig, workers: int = 1, tag: str | None = None):
    """Run every seed, write records, the aggregate and CSV tables; return the aggregate."""
    out = Path(cfg.out)
    run_id = tag or f"{time.strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:6]}"
    stem = f"{cfg.name}-{cfg.config_hash()[:8]}-{run_id}"
    jobs = [(cfg, s) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_safe, jobs))
    else:
        results = [_run_one_safe(j) for j in jobs]
    aborts = [a for _, a in results if a is not None]
    if aborts:
        path = atomic_write(out / f"{stem}-abort.json", json.dumps(aborts, indent=2, default=str))
        raise RunFailed(path)
    records = [r for r, _ in results]
    paths = []
    for rec in records:
        paths.append(atomic_write(out / "records" / f"{stem}-seed{rec['seed']}.json", json.dumps(rec, indent=1)))
    agg = aggregate(records)
    agg["records"] = [str(p) for p in paths]
    atomic_write(out / f"{stem}-aggregate.json", json.dumps(agg, indent=2))
    triples = [(r["seed"], i + 1, j + 1, a) for r in records
               for i, j, a in AccuracyMatrix.from_rows(r["matrix"]).to_triples()]
    atomic_write(out / f"{stem}-matrix.csv", csv_text(["seed", "session", "task", "accuracy"], triples))
    atomic_write(out / f"{stem}-summary.csv", csv_text(*summary_table(records)))
    return agg


def summary_table(records):
    header = ["name", "config_hash", "seed", *METRIC_KEYS]
    rows = [[r["name"], r["config_hash"], r["seed"], *[_fmt(r["metrics"].get(k)) for k in METRIC_KEYS]]
            for r in records]
    return header, rows


def _fmt(v):
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------- sweep


def parse_grid(specs) -> dict:
    """``["train.loss.beta=0,1,4", ...]`` -> ``{"train.loss.beta": [0, 1, 4]}``."""
    grid = {}
    for spec in specs or ():
        if "=" not in spec:
            raise ConfigError(f"grid entry {spec!r} must look like key=v1,v2")
        key, vals = spec.split("=", 1)
        grid[key.strip()] = [parse_value(v) for v in vals.split(",") if v.strip()]
        if not grid[key.strip()]:
            raise ConfigError(f"grid entry {key!r} has no values")
    return grid


def grid_points(base: RunConfig, grid: dict):
    """Yield ``(label, point, config)`` over the cross product (one base point for an empty grid)."""
    base_dict = base.to_dict()
    for key in grid:
        cur = base_dict
        for k in key.split("."):
            if not isinstance(cur, dict) or k not in cur:
                raise ConfigError(f"grid key {key!r} is not a config field")
            cur = cur[k]
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        d = json.loads(json.dumps(base_dict))
        for k, v in zip(keys, combo):
            _set_path(d, k, v)
        point = dict(zip(keys, combo))
        label = ",".join(f"{k.rsplit('.', 1)[-1]}={v}" for k, v in point.items())
        if label:
            d["name"] = f"{base.name}[{label}]"
        yield label, point, _build(RunConfig, d)


def sweep(base: RunConfig, grid: dict, workers: int = 1):
    points = list(grid_points(base, grid))
    aggs = []
    for _, point, cfg in points:
        aggs.append((point, execute(cfg, workers)))
    keys = list(grid)
    header = [*keys, "name", *(f"{m}_{s}" for m in METRIC_KEYS for s in ("mean", "stderr"))]
    rows = []
    for point, agg in aggs:
        row = [point[k] for k in keys] + [agg["name"]]
        for m in METRIC_KEYS:
            cell = agg["metrics"].get(m)
            row += [repr(cell["mean"]), repr(cell["stderr"])] if cell else ["", ""]
        rows.append(row)
    stamp = f"{time.strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:6]}"
    path = atomic_write(Path(base.out) / f"sweep-{base.name}-{stamp}.csv", csv_text(header, rows))
    return header, rows, path


# ---------------------------------------------------------------- records: plot / report


def _expand(paths):
    for p in paths:
        p = Path(p)
        if p.is_dir():
            yield from sorted(p.rglob("*.json"))
        else:
            yield p


def load_records(paths):
    """Parse run records, skipping (with a warning) anything malformed."""
    good, bad = [], []
    for p in _expand(paths):
        try:
            rec = json.loads(Path(p).read_text())
            if rec.get("version") != RECORD_VERSION or "matrix" not in rec:
                raise ValueError("not a run record")
            AccuracyMatrix.from_rows(rec["matrix"])
            good.append(rec)
        except (OSError, ValueError, TypeError, KeyError) as e:
            warnings.warn(f"skipping {p}: {e}", stacklevel=2)
            bad.append(str(p))
    return good, bad


def recompute_metrics(rec) -> dict:
    """Final metrics from the persisted matrix and phase accuracies alone."""
    A = AccuracyMatrix.from_rows(rec["matrix"])
    class_acc = {t: {c: v for c, v in accs.items()} for t, accs in rec.get("class_accuracy", {}).items()}
    return final_metrics(A, rec["phase_accuracy"], class_acc, rec.get("probe"), rec.get("mode", "class"))


def report(paths):
    records, bad = load_records(paths)
    groups = {}
    for r in records:
        r = {**r, "metrics": recompute_metrics(r)}
        groups.setdefault((r["name"], r["config_hash"]), []).append(r)
    header = ["name", "config_hash", "n_seeds", *(f"{m}_{s}" for m in METRIC_KEYS for s in ("mean", "stderr"))]
    rows = []
    for (name, h), recs in sorted(groups.items()):
        agg = aggregate(recs)
        row = [name, h, len(recs)]
        for m in METRIC_KEYS:
            cell = agg["metrics"].get(m)
            row += [repr(cell["mean"]), repr(cell["stderr"])] if cell else ["", ""]
        rows.append(row)
    return header, rows, bad


def _curves(records):
    """name -> mean over seeds of per-session curves."""
    by_name = {}
    for r in records:
        by_name.setdefault(r["name"], []).append(r)
    out = {}
    for name, recs in by_name.items():
        acc = np.mean([[float(np.mean(row)) for row in r["matrix"]] for r in recs], axis=0)
        cur = np.mean([[d["current_accuracy"] for d in r["diagnostics"]] for r in recs], axis=0)
        old = [np.mean([r["diagnostics"][i]["old_accuracy"] for r in recs]) if i else np.nan
               for i in range(len(recs[0]["diagnostics"]))]
        probe = np.mean([r["probe"] for r in recs], axis=0) if all(r.get("probe") for r in recs) else None
        out[name] = {"accuracy": acc, "current": cur, "old": np.asarray(old, dtype=float), "probe": probe}
    return out


def plot(paths, out_dir):
    """Write accuracy, decomposition and (when recorded) probe curves; return the file list."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records, bad = load_records(paths)
    if not records:
        return [], bad
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = _curves(records)
    written = []

    def save(fig, name):
        path = out_dir / name
        tmp = out_dir / f".{name}.tmp"
        fig.savefig(tmp, format="png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        os.replace(tmp, path)
        written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, c in curves.items():
        ax.plot(np.arange(1, len(c["accuracy"]) + 1), c["accuracy"], marker="o", label=name)
    ax.set(xlabel="session", ylabel="average observed accuracy", ylim=(0, 1))
    ax.legend(fontsize=7)
    fig.tight_layout()
    save(fig, "accuracy.png")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, (name, c) in enumerate(curves.items()):
        x = np.arange(1, len(c["current"]) + 1)
        color = f"C{i % 10}"
        ax.plot(x, c["current"], color=color, label=f"{name} current")
        ax.plot(x, c["old"], color=color, linestyle="--", label=f"{name} old")
    ax.set(xlabel="session", ylabel="accuracy", ylim=(0, 1))
    ax.legend(fontsize=7)
    fig.tight_layout()
    save(fig, "decomposition.png")

    with_probe = {n: c for n, c in curves.items() if c["probe"] is not None}
    if with_probe:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, c in with_probe.items():
            ax.plot(np.arange(1, len(c["probe"]) + 1), c["probe"], marker="o", label=name)
        ax.set(xlabel="session", ylabel="task-1 linear probe accuracy", ylim=(0, 1))
        ax.legend(fontsize=7)
        fig.tight_layout()
        save(fig, "probe.png")
    return written, bad


# ---------------------------------------------------------------- entry point


def _parser():
    p = argparse.ArgumentParser(prog="prd", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="run a single seed (overrides the seeds list)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--mode", choices=MODES, help="evaluation protocol")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. train.lr=0.05")
        sp.add_argument("--workers", type=int, default=1, help="parallel seed workers")

    common(sub.add_parser("run", help="train every seed of one config"))
    sw = sub.add_parser("sweep", help="cross-product grid of runs")
    common(sw)
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                    help="grid axis, e.g. train.loss.beta=0,1,4 (repeatable)")
    for verb in ("plot", "report"):
        sp = sub.add_parser(verb, help=f"{verb} from run records")
        sp.add_argument("records", nargs="+", help="record files or directories")
        sp.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _flags(args):
    flags = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r} must be KEY=VALUE")
        k, v = item.split("=", 1)
        _set_path(flags, k.strip(), parse_value(v))
    if args.seed is not None:
        flags["seeds"] = [args.seed]
    if args.out is not None:
        flags["out"] = args.out
    if args.mode is not None:
        flags["mode"] = args.mode
    return flags


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.verb in ("run", "sweep"):
            cfg = load_config(args.config, _flags(args))
            if args.verb == "run":
                agg = execute(cfg, args.workers)
                for k, cell in agg["metrics"].items():
                    print(f"{agg['name']} {k}: {cell['mean']:.4f} ± {cell['stderr']:.4f} (n={cell['n']})")
            else:
                header, rows, path = sweep(cfg, parse_grid(args.grid), args.workers)
                sys.stdout.write(csv_text(header, rows))
                log.info("sweep table written to %s", path)
            return EXIT_OK
        if args.verb == "plot":
            written, bad = plot(args.records, args.out or "figures")
            for p in written:
                print(p)
            return EXIT_OK if written else EXIT_CONFIG
        header, rows, bad = report(args.records)
        if not rows:
            log.error("no readable run records")
            return EXIT_CONFIG
        text = csv_text(header, rows)
        sys.stdout.write(text)
        if args.out:
            atomic_write(Path(args.out) / "report.csv", text)
        return EXIT_OK
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as e:
        print(f"training aborted; diagnostics in {e.path}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
