"""``fpbench`` command line: loss-network training, the experiment grid,
benchmarks, convergence curves, data generation and weight inspection.

Configuration is a JSON object whose keys are the fields of
:class:`ExperimentConfig`; command-line flags override file values and the
``FPBENCH_SEED`` environment variable overrides the file's seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import benchmark as B
from .datasets import Dataset, RawMeta, assign_roles, gen_shapes_dataset, gen_sprite_dataset, load_raw, save_raw
from .evaluation import (
    ProbeConfig,
    accuracy,
    aggregate_runs,
    embed_dataset,
    fit_supervised,
    format_mean_std,
    test_best_probe,
    train_probes,
)
from .nets import Model, build_loss_network, load_weights, save_weights, weights_to_bytes
from .procedures import PROCEDURE_NAMES, TrainConfig, make_procedure, pretrain, pretrain_with_patience

log = logging.getLogger("fpbench")

DATASETS = ("shapes", "sprites", "raw")


@dataclass
class ExperimentConfig:
    dataset: str = "shapes"
    image_size: int = 32
    num_classes: int = 10
    pretrain_n: int = 256
    probe_train_n: int = 256
    probe_test_n: int = 256
    raw_path: str | None = None
    raw_meta: dict | None = None
    z_values: list = field(default_factory=lambda: [64, 128, 256])
    procedures: list = field(default_factory=lambda: list(PROCEDURE_NAMES))
    repeats: int = 4
    autoencoder_epochs: int = 20
    probe_epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    output_dir: str = "fpbench-out"
    lossnet_path: str | None = None  # default: <output_dir>/lossnet.fpbw
    lossnet_n: int = 6000
    lossnet_epochs: int = 10
    lossnet_accuracy_floor: float = 0.5
    record_timing: bool = False  # timings make results.csv machine-dependent
    timing_epochs: int = 3
    jobs: int = 1
    convergence_z: int = 64
    convergence_patience: int = 15
    convergence_max_epochs: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "raw" and not (self.raw_path and self.raw_meta):
            raise ValueError("dataset 'raw' needs raw_path and raw_meta")
        if not self.z_values or any(int(z) < 1 for z in self.z_values):
            raise ValueError("z_values must be a non-empty list of positive integers")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.procedures:
            raise ValueError("procedures must be non-empty")
        for p in self.procedures:
            make_procedure(p)
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        for name in ("autoencoder_epochs", "probe_epochs", "batch_size", "lossnet_epochs", "convergence_max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def lossnet_file(self) -> Path:
        return Path(self.lossnet_path) if self.lossnet_path else self.out / "lossnet.fpbw"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunManifest:
    command: str
    config: dict
    version: str = __version__
    timestamp: str = ""
    seeds: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    cells: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def fatal(self) -> bool:
        return any(c.get("status") != "ok" for c in self.cells)

    def add(self, path) -> None:
        self.artifacts.append(str(path))

    def write(self, path) -> None:
        self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        missing = [p for p in self.artifacts if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing artifacts: {missing}")
        B.atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data helpers


def make_source(cfg: ExperimentConfig, n: int | None = None) -> Dataset:
    total = n if n is not None else cfg.pretrain_n + cfg.probe_train_n + cfg.probe_test_n
    if cfg.dataset == "shapes":
        return gen_shapes_dataset(total, cfg.image_size, cfg.num_classes, seed=cfg.seed)
    if cfg.dataset == "sprites":
        return gen_sprite_dataset(total, cfg.image_size, seed=cfg.seed)
    return load_raw(cfg.raw_path, cfg.raw_meta)


def _needs_lossnet(cfg: ExperimentConfig) -> bool:
    return any(make_procedure(p).needs_lossnet for p in cfg.procedures)


def _load_lossnet(cfg: ExperimentConfig, image_shape) -> Model | None:
    path = cfg.lossnet_file
    if not path.exists():
        if _needs_lossnet(cfg):
            raise FileNotFoundError(f"loss network weights not found at {path}; run 'fpbench train-lossnet' first")
        return None
    ln = load_weights(path).freeze()
    if ln.input_shape != tuple(image_shape):
        raise ValueError(f"loss network expects {list(ln.input_shape)} images, dataset has {list(image_shape)}")
    return ln


def _train_cfg(cfg: ExperimentConfig, z: int, seed: int, epochs: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=epochs or cfg.autoencoder_epochs, batch_size=cfg.batch_size, lr=cfg.lr, z=z, seed=seed
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train_lossnet(cfg: ExperimentConfig) -> RunManifest:
    """Train the loss network on shapes data, freeze it and save it."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train-lossnet", asdict(cfg))
    seed = cfg.seed + 7919  # keep lossnet data apart from experiment data
    manifest.seeds["lossnet"] = seed
    data = gen_shapes_dataset(cfg.lossnet_n, cfg.image_size, cfg.num_classes, seed=seed)
    n_tr, n_va = int(0.7 * len(data)), int(0.15 * len(data))
    x, y = data.images, data.labels
    model = build_loss_network(cfg.image_size, cfg.num_classes, data.image_shape[0], seed=seed)
    t0 = time.perf_counter()
    fit_supervised(
        model, x[:n_tr], y[:n_tr], x[n_tr:n_tr + n_va], y[n_tr:n_tr + n_va], "classification",
        cfg.lossnet_epochs, cfg.batch_size, cfg.lr, seed,
    )
    acc = accuracy(model.predict(x[n_tr + n_va:]), y[n_tr + n_va:])
    model.freeze()
    path = cfg.lossnet_file
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(model, path)
    manifest.add(path)
    manifest.metrics = {"heldout_accuracy": acc, "train_seconds": time.perf_counter() - t0}
    if acc < cfg.lossnet_accuracy_floor:
        manifest.warnings.append(f"loss network held-out accuracy {acc:.3f} below floor {cfg.lossnet_accuracy_floor}")
    manifest.cells.append({"cell": "lossnet", "status": "ok"})
    manifest.write(cfg.out / "lossnet_manifest.json")
    log.info("loss network accuracy %.3f -> %s", acc, path)
    return manifest


def _mean_epoch_seconds(history) -> float:
    w = history.wall_seconds
    return float(np.mean(w[1:] if len(w) > 1 else w))


def _run_cell(cfg: ExperimentConfig, lossnet, roles, proc: str, z: int, rep: int, cell_dir: Path):
    seed = cfg.seed + rep
    spec = make_procedure(proc)
    pre, ptr, pte = roles
    enc, dec, hist = pretrain(spec, pre, lossnet, _train_cfg(cfg, z, seed))
    probes = train_probes(embed_dataset(enc, lossnet, spec, ptr), ProbeConfig(cfg.probe_epochs, cfg.batch_size, cfg.lr, seed))
    result = test_best_probe(probes, embed_dataset(enc, lossnet, spec, pte))
    c, s, _ = pre.image_shape
    flops = B.estimate_flops(spec, B.NetConfig(s, c, z, cfg.num_classes)).total_flops_per_sample
    record = B.RunRecord(
        proc, z, seed, result.metric_kind, result.value,
        _mean_epoch_seconds(hist) if cfg.record_timing else None, flops, hist.best_epoch,
    )
    # write into a temp dir and rename, so a failure leaves no partial cell
    tmp = cell_dir.with_name(cell_dir.name + ".partial")
    tmp.mkdir(parents=True, exist_ok=True)
    save_weights(enc, tmp / "encoder.fpbw")
    hist.to_csv(tmp / "history.csv")
    B.atomic_write(tmp / "record.json", json.dumps(asdict(record), sort_keys=True) + "\n")
    if cell_dir.exists():
        for f in cell_dir.iterdir():
            f.unlink()
        cell_dir.rmdir()
    os.replace(tmp, cell_dir)
    return record, hist


def cmd_run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Run the procedures x z_values x repeats grid and write its reports."""
    out = cfg.out
    (out / "cells").mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("run-experiment", asdict(cfg))
    source = make_source(cfg)
    lossnet = _load_lossnet(cfg, source.image_shape)
    roles = {}
    for rep in range(cfg.repeats):
        roles[rep] = assign_roles(cfg.pretrain_n, cfg.probe_train_n, cfg.probe_test_n, source, seed=cfg.seed + rep)
        manifest.seeds[f"repeat{rep}"] = cfg.seed + rep

    grid = [(rep, z, p) for rep in range(cfg.repeats) for z in cfg.z_values for p in cfg.procedures]

    def run(cell):
        rep, z, proc = cell
        cell_dir = out / "cells" / f"{proc}_z{z}_r{rep}"
        try:
            record, hist = _run_cell(cfg, lossnet, roles[rep], proc, z, rep, cell_dir)
            return cell, cell_dir, record, hist, None
        except Exception as exc:  # one bad cell must not stop the grid
            log.error("cell %s z=%d repeat=%d failed: %s", proc, z, rep, exc)
            return cell, cell_dir, None, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(c) for c in grid]

    records, curves = [], {}
    for (rep, z, proc), cell_dir, record, hist, err in results:
        entry = {"procedure": proc, "z": z, "repeat": rep, "seed": cfg.seed + rep}
        if err is None:
            entry.update(status="ok", dir=str(cell_dir))
            records.append(record)
            manifest.add(cell_dir / "encoder.fpbw")
            manifest.add(cell_dir / "history.csv")
            if rep == 0 and hist.val_loss[0] > 0:
                curves.setdefault(z, []).append(B.normalize_convergence(hist.val_loss, proc))
        else:
            entry.update(status="failed", error=err)
        manifest.cells.append(entry)

    if records:
        B.emit_csv(records, out / "results.csv")
        manifest.add(out / "results.csv")
        _emit_summary(records, out / "summary.csv")
        manifest.add(out / "summary.csv")
    for z, cs in curves.items():
        path = out / f"curves_z{z}.svg"
        B.emit_svg(cs, path, f"validation loss, z={z}")
        manifest.add(path)
    manifest.write(out / "manifest.json")
    return manifest


def summarize(records) -> list[dict]:
    """mean/std per (procedure, z), in first-seen order."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.procedure, r.z, r.metric_kind), []).append(r.metric)
    rows = []
    for (proc, z, kind), vals in groups.items():
        mean, std = aggregate_runs(vals)
        rows.append({"procedure": proc, "z": z, "metric_kind": kind, "n": len(vals), "mean": mean, "std": std,
                     "formatted": format_mean_std(mean, std)})
    return rows


def _emit_summary(records, path) -> None:
    lines = ["procedure,z,metric_kind,n,mean,std,formatted"]
    for r in summarize(records):
        lines.append(f"{r['procedure']},{r['z']},{r['metric_kind']},{r['n']},{r['mean']!r},{r['std']!r},{r['formatted']}")
    B.atomic_write(path, "\n".join(lines) + "\n")


def cmd_benchmark(cfg: ExperimentConfig, timing: bool = True) -> RunManifest:
    """FLOP estimates and (optionally) measured epoch times per procedure and z."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("benchmark", asdict(cfg))
    source = make_source(cfg, cfg.pretrain_n)
    lossnet = _load_lossnet(cfg, source.image_shape) if timing else None
    c, s, _ = source.image_shape
    rows = []
    for z in cfg.z_values:
        for proc in cfg.procedures:
            spec = make_procedure(proc)
            report = B.estimate_flops(spec, B.NetConfig(s, c, int(z), cfg.num_classes))
            status = {"procedure": proc, "z": z, "status": "ok"}
            if timing:
                try:
                    secs = B.time_epochs(spec, source, lossnet, _train_cfg(cfg, int(z), cfg.seed), cfg.timing_epochs)
                    report.seconds_per_epoch, report.seconds_std = B.timing_stats(secs)
                    report.timed_epochs = len(secs)
                except Exception as exc:
                    status.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            manifest.cells.append(status)
            rows.append((z, report))
    B.emit_cost_csv(rows, out / "benchmark.csv")
    manifest.add(out / "benchmark.csv")
    manifest.write(out / "benchmark_manifest.json")
    return manifest


def cmd_convergence(cfg: ExperimentConfig) -> RunManifest:
    """Train every procedure at ``convergence_z`` until validation loss stalls
    for ``convergence_patience`` epochs; write raw and normalised curves."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("convergence", asdict(cfg))
    source = make_source(cfg, cfg.pretrain_n)
    lossnet = _load_lossnet(cfg, source.image_shape)
    z = cfg.convergence_z
    manifest.seeds["convergence"] = cfg.seed
    curves = []
    lines = ["procedure,epoch,raw,normalized"]
    for proc in cfg.procedures:
        entry = {"procedure": proc, "z": z}
        try:
            _, _, hist = pretrain_with_patience(
                make_procedure(proc), source, lossnet,
                _train_cfg(cfg, z, cfg.seed, cfg.convergence_max_epochs), cfg.convergence_patience,
            )
            curve = B.normalize_convergence(hist.val_loss, proc)
            stopped = len(hist) - hist.best_epoch >= cfg.convergence_patience
            entry.update(status="ok", epochs=len(hist), best_epoch=hist.best_epoch, stopped_by_patience=stopped)
            if not stopped:
                manifest.warnings.append(f"{proc} hit the epoch cap before patience ran out")
            curves.append(curve)
            lines += [f"{proc},{i + 1},{r!r},{v!r}" for i, (r, v) in enumerate(zip(curve.raw, curve.normalized))]
        except Exception as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        manifest.cells.append(entry)
    B.atomic_write(out / "convergence.csv", "\n".join(lines) + "\n")
    manifest.add(out / "convergence.csv")
    if curves:
        B.emit_svg(curves, out / "convergence.svg", f"normalized validation loss, z={z}")
        manifest.add(out / "convergence.svg")
    manifest.write(out / "convergence_manifest.json")
    return manifest


def cmd_gen_data(cfg: ExperimentConfig, n: int, path) -> RawMeta:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = save_raw(make_source(cfg, n), path)
    B.atomic_write(path.with_suffix(path.suffix + ".json"), json.dumps(asdict(meta), sort_keys=True) + "\n")
    return meta


def cmd_inspect_weights(path) -> dict:
    model = load_weights(path)
    return {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "output_shape": list(model.output_shape),
        "tap": model.tap,
        "layers": [l.kind for l in model.layers],
        "parameters": model.num_parameters(),
        "bytes": len(weights_to_bytes(model)),
        "sha256": model.checksum(),
    }


# ---------------------------------------------------------------------------
# argument handling


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def _str_list(s: str) -> list[str]:
    return [v for v in s.split(",") if v]


_OVERRIDES = {
    # flag: (config key, parser)
    "dataset": ("dataset", str),
    "image_size": ("image_size", int),
    "pretrain_n": ("pretrain_n", int),
    "probe_train_n": ("probe_train_n", int),
    "probe_test_n": ("probe_test_n", int),
    "z_values": ("z_values", _int_list),
    "procedures": ("procedures", _str_list),
    "repeats": ("repeats", int),
    "epochs": ("autoencoder_epochs", int),
    "probe_epochs": ("probe_epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "seed": ("seed", int),
    "output_dir": ("output_dir", str),
    "lossnet": ("lossnet_path", str),
    "jobs": ("jobs", int),
}


def build_config(args: argparse.Namespace, environ=os.environ) -> ExperimentConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    if "FPBENCH_SEED" in environ:
        d["seed"] = int(environ["FPBENCH_SEED"])
    for flag, (key, parse) in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = parse(v)
    if getattr(args, "timing", None) is not None:
        d["record_timing"] = args.timing
    return ExperimentConfig.from_dict(d)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpbench", description="Autoencoder pretraining procedure benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        for flag in _OVERRIDES:
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag)
        return sp

    common(sub.add_parser("train-lossnet", help="train and save the loss network"))
    sp = common(sub.add_parser("run-experiment", help="run the procedure x z x repeat grid"))
    sp.add_argument("--timing", action=argparse.BooleanOptionalAction, default=None,
                    help="record seconds_per_epoch in results.csv")
    sp = common(sub.add_parser("benchmark", help="FLOP estimates and epoch timings"))
    sp.add_argument("--no-timing", action="store_true", help="analytic FLOP counts only")
    common(sub.add_parser("convergence", help="patience-stopped convergence curves"))
    sp = common(sub.add_parser("gen-data", help="write a generated dataset in the raw format"))
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp = sub.add_parser("inspect-weights", help="summarise a weight file")
    sp.add_argument("path")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect-weights":
            print(json.dumps(cmd_inspect_weights(args.path), indent=2))
            return 0
        cfg = build_config(args)
        if args.command == "gen-data":
            meta = cmd_gen_data(cfg, args.n, args.out)
            print(json.dumps(asdict(meta)))
            return 0
        if args.command == "train-lossnet":
            manifest = cmd_train_lossnet(cfg)
        elif args.command == "run-experiment":
            manifest = cmd_run_experiment(cfg)
            for row in summarize(B.read_csv(cfg.out / "results.csv")) if (cfg.out / "results.csv").exists() else []:
                print(f"{row['procedure']:8s} z={row['z']:<4d} {row['metric_kind']}: {row['formatted']}")
        elif args.command == "benchmark":
            manifest = cmd_benchmark(cfg, timing=not args.no_timing)
        else:
            manifest = cmd_convergence(cfg)
    except (ValueError, OSError) as exc:
        print(f"fpbench: error: {exc}", file=sys.stderr)
        return 2
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 1 if manifest.fatal else 0


if __name__ == "__main__":
    sys.exit(main())
