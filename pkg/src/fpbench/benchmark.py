"""Cost accounting for the pretraining procedures.

Analytic FLOP counts per procedure, serialised wall-clock timing of epochs,
normalised convergence curves, and the CSV/SVG writers used for reports.

FLOP conventions: a conv layer costs ``2*K*C*kh*kw`` per output element, a
transposed conv ``2*Cin*Cout*k*k*Hin*Win``, a dense layer ``2*I*O``;
activations and reshapes are free. A backward pass is taken to cost twice
its forward pass.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .nets import Model, build_loss_network, feature_dim
from .procedures import ProcedureSpec, TrainConfig, build_codec, pretrain

# Timing runs take this lock so that two of them never overlap.
TIMING_LOCK = threading.Lock()
TIMING_NOTE = "seconds_per_epoch excludes one warm-up epoch; std is uncorrected (divide by N)"

CSV_HEADER = ("procedure", "z", "seed", "metric_kind", "metric", "seconds_per_epoch", "flops_per_sample", "best_epoch")


# ---------------------------------------------------------------------------
# analytic FLOPs


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    channels: int = 3
    z: int = 64
    num_classes: int = 10
    feature_hidden: int = 2048


def layer_flops(model: Model, i: int) -> int:
    """Forward FLOPs per sample of layer ``i`` in ``model``."""
    spec = model.layers[i]
    in_shape, out_shape = model.shapes[i], model.shapes[i + 1]
    if spec.kind == "conv":
        k, c = spec.out, in_shape[0]
        return 2 * k * c * spec.kernel ** 2 * out_shape[1] * out_shape[2]
    if spec.kind == "deconv":
        cin, h, w = in_shape
        return 2 * cin * spec.out * spec.kernel ** 2 * h * w
    if spec.kind == "dense":
        return 2 * in_shape[0] * spec.out
    return 0


def model_flops(model: Model, upto: int | None = None) -> int:
    last = len(model.layers) - 1 if upto is None else upto
    return sum(layer_flops(model, i) for i in range(last + 1))


@dataclass
class CostReport:
    procedure: str
    forward_flops: int  # per sample, everything evaluated in a training step
    backward_flops: int  # per sample, 2x the taped forward part
    setup_flops: int = 0  # per sample, one-time feature caching
    seconds_per_epoch: float | None = None
    seconds_std: float | None = None
    timed_epochs: int = 0

    @property
    def total_flops_per_sample(self) -> int:
        return self.forward_flops + self.backward_flops


def estimate_flops(spec: ProcedureSpec, net_cfg: NetConfig = NetConfig()) -> CostReport:
    """Per-sample training cost of ``spec`` under the conventions above.

    The taped path (encoder, decoder and, for PS, the loss network applied to
    the reconstruction) pays forward plus backward. Computing p(X) is
    forward-only; procedures that cache features pay it once, as setup.
    """
    c, s = net_cfg.channels, net_cfg.image_size
    lossnet = build_loss_network(s, net_cfg.num_classes, c)
    m = feature_dim(lossnet)
    encoder, decoder = build_codec(spec, (c, s, s), m, net_cfg.z, 0, net_cfg.feature_hidden)
    lossnet_fwd = model_flops(lossnet, upto=lossnet.tap)

    taped = model_flops(encoder) + model_flops(decoder)
    if spec.loss.variant == "perceptual_similarity":
        taped += lossnet_fwd
    target = lossnet_fwd if spec.needs_lossnet else 0
    setup = 0
    if spec.caches_features:
        setup, target = target, 0
    return CostReport(spec.name, taped + target, 2 * taped, setup)


# ---------------------------------------------------------------------------
# timing


def time_epochs(spec: ProcedureSpec, data: Dataset, lossnet: Model | None, cfg: TrainConfig, n_epochs: int = 3) -> list[float]:
    """Wall seconds of ``n_epochs`` training epochs after one untimed warm-up.

    Holds :data:`TIMING_LOCK` for the whole run. Epoch time includes the
    validation pass but not feature caching.
    """
    if n_epochs < 3:
        raise ValueError("time_epochs needs n_epochs >= 3")
    run_cfg = TrainConfig(**{**asdict(cfg), "epochs": n_epochs + 1})
    with TIMING_LOCK:
        _, _, history = pretrain(spec, data, lossnet, run_cfg)
    return list(history.wall_seconds[1:])


def timing_stats(seconds) -> tuple[float, float]:
    a = np.asarray(seconds, dtype=np.float64)
    return float(a.mean()), float(a.std())


# ---------------------------------------------------------------------------
# convergence curves


@dataclass
class ConvergenceCurve:
    procedure: str
    raw: list[float]
    normalized: list[float] = field(default_factory=list)


def normalize_convergence(raw, procedure: str = "") -> ConvergenceCurve:
    raw = [float(v) for v in raw]
    if not raw:
        raise ValueError("convergence curve is empty")
    if not raw[0] > 0.0 or not math.isfinite(raw[0]):
        raise ValueError(f"first loss must be positive and finite to normalise, got {raw[0]}")
    first = raw[0]
    return ConvergenceCurve(procedure, raw, [v / first for v in raw])


# ---------------------------------------------------------------------------
# records and writers


@dataclass
class RunRecord:
    procedure: str
    z: int
    seed: int
    metric_kind: str
    metric: float
    seconds_per_epoch: float | None
    flops_per_sample: int
    best_epoch: int


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def atomic_write(path, data: str | bytes) -> None:
    """Write to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    return buf.getvalue()


def emit_csv(records, path) -> None:
    records = list(records)
    if not records:
        raise ValueError("emit_csv needs at least one record")
    atomic_write(path, records_to_csv(records))


def read_csv(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            out.append(
                RunRecord(
                    row["procedure"],
                    int(row["z"]),
                    int(row["seed"]),
                    row["metric_kind"],
                    float(row["metric"]),
                    float(row["seconds_per_epoch"]) if row["seconds_per_epoch"] else None,
                    int(row["flops_per_sample"]),
                    int(row["best_epoch"]),
                )
            )
    return out


COST_HEADER = (
    "procedure", "z", "forward_flops", "backward_flops", "total_flops_per_sample",
    "setup_flops", "seconds_per_epoch", "seconds_std", "timed_epochs",
)


def emit_cost_csv(rows, path) -> None:
    """``rows`` are ``(z, CostReport)`` pairs. The first line is a ``#`` note."""
    buf = io.StringIO()
    buf.write(f"# {TIMING_NOTE}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_HEADER)
    for z, r in rows:
        w.writerow([
            r.procedure, z, r.forward_flops, r.backward_flops, r.total_flops_per_sample, r.setup_flops,
            _fmt(r.seconds_per_epoch), _fmt(r.seconds_std), r.timed_epochs,
        ])
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def render_svg(curves, title: str = "", xlabel: str = "epoch", ylabel: str = "normalized validation loss") -> str:
    """Line chart of ``curve.normalized`` against 1-based epoch."""
    curves = list(curves)
    if not curves:
        raise ValueError("render_svg needs at least one curve")
    width, height = 640, 420
    left, right, top, bottom = 70, 170, 40, 55
    pw, ph = width - left - right, height - top - bottom
    xmax = max(max(len(c.normalized) for c in curves), 2)
    ys = [v for c in curves for v in c.normalized]
    ymin, ymax = min(0.0, min(ys)), max(ys)
    yt = _nice_ticks(ymin, ymax)
    ymin, ymax = min(ymin, yt[0]), max(ymax, yt[-1])
    xt = _nice_ticks(1, xmax)

    def px(x):
        return left + (x - 1) / (xmax - 1) * pw

    def py(y):
        return top + ph - (y - ymin) / (ymax - ymin) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    for t in yt:
        y = py(t)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{t:g}</text>')
    for t in xt:
        if t < 1 or t > xmax:
            continue
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(
        f'<text x="18" y="{top + ph / 2:.2f}" text-anchor="middle" transform="rotate(-90 18 {top + ph / 2:.2f})">{_esc(ylabel)}</text>'
    )
    for k, c in enumerate(curves):
        colour = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(i + 1):.2f},{py(v):.2f}" for i, v in enumerate(c.normalized))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.8" points="{pts}"/>')
        ly = top + 12 + 18 * k
        lx = left + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{colour}" stroke-width="2.5"/>')
        out.append(f'<text x="{lx + 28}" y="{ly + 4}">{_esc(c.procedure or f"series {k + 1}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_svg(curves, path, title: str = "") -> None:
    atomic_write(path, render_svg(curves, title))
