"""Embedding-quality evaluation with predictor MLPs.

An encoder embeds the probe data once; seven small MLPs are trained on the
embeddings with best-validation-epoch selection, and the MLP with the lowest
validation loss is scored on the test embeddings. Also holds the supervised
reference CNN and the mean/std aggregation used in reports.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .nets import ENCODER_WIDTHS, PROBE_ARCHS, LayerSpec, Model, build_predictor_mlp, encoder_blocks
from .procedures import DivergenceError, ProcedureSpec, TrainHistory, compute_features

METRICS = {"classification": "accuracy", "positioning": "mean_euclidean_distance"}


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray  # [N, z]
    labels: np.ndarray
    task: str
    num_classes: int = 0
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.embeddings)

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 2


@dataclass
class EvalResult:
    metric_kind: str
    value: float
    best_arch_id: int
    per_arch_val_losses: list[float]


def embed_dataset(encoder: Model, lossnet: Model | None, spec: ProcedureSpec, data: Dataset, batch_size: int = 256) -> EmbeddingSet:
    """Embed ``data`` with ``encoder`` (feature encoders receive p(X)), untaped."""
    if spec.encoder_input == "feature":
        if lossnet is None:
            raise ValueError(f"{spec.name} embeds loss-network features; lossnet required")
        inputs = compute_features(lossnet, data.images, batch_size)
    else:
        inputs = data.images
    if inputs.shape[1:] != encoder.input_shape:
        raise T.ShapeError(f"encoder expects {list(encoder.input_shape)}, {spec.name} routing gives {list(inputs.shape[1:])}")
    emb = encoder.predict(inputs, batch_size)
    z = encoder.output_shape[0]
    return EmbeddingSet(emb, data.labels.copy(), data.task, data.num_classes, {"procedure": spec.name, "z": z})


# ---------------------------------------------------------------------------
# supervised fitting


def supervised_loss(out: T.Tensor, targets: np.ndarray, task: str) -> T.Tensor:
    if task == "classification":
        return T.softmax_cross_entropy(out, targets)
    return T.sse(T.Tensor(targets), out)


def _split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ValueError("need at least two samples to split")
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _mean_loss(model: Model, x: np.ndarray, y: np.ndarray, task: str, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            total += supervised_loss(model(x[s:s + batch_size]), y[s:s + batch_size], task).item()
    return total / len(x)


def fit_supervised(
    model: Model,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    task: str,
    epochs: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> TrainHistory:
    """Adam-train ``model`` in place, keeping the lowest-validation-loss epoch."""
    params = model.parameters()
    for p in params:
        p.zero_grad()
    state = T.AdamState()
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    best, best_state = math.inf, None

    for epoch in range(epochs):
        start = time.perf_counter()
        perm = rng.permutation(len(x_train))
        total = 0.0
        try:
            for s in range(0, len(perm), batch_size):
                idx = perm[s:s + batch_size]
                loss = supervised_loss(model(x_train[idx]), y_train[idx], task)
                T.backward(loss)
                T.optimizer_step(params, state, lr)
                total += loss.item()
            val = _mean_loss(model, x_val, y_val, task, 256)
        except T.NonFiniteError as exc:
            raise DivergenceError(f"{model.name} diverged in epoch {epoch + 1}", history) from exc
        if not math.isfinite(val):
            raise DivergenceError(f"{model.name} diverged in epoch {epoch + 1}", history)
        history.append(total / len(x_train), val, time.perf_counter() - start)
        if val < best:
            best, best_state = val, model.state()
    model.load_state(best_state)
    return history


# ---------------------------------------------------------------------------
# probes


@dataclass
class Standardizer:
    """Per-column affine map fitted on training data."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, a: np.ndarray) -> "Standardizer":
        std = a.std(axis=0)
        return cls(a.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def apply(self, a: np.ndarray) -> np.ndarray:
        return (a - self.mean) / self.scale

    def invert(self, a: np.ndarray) -> np.ndarray:
        return a * self.scale + self.mean


@dataclass
class ProbeRun:
    arch_id: int
    model: Model
    history: TrainHistory
    inputs: Standardizer
    targets: Standardizer | None
    diverged: bool = False

    @property
    def best_val_loss(self) -> float:
        return math.inf if self.diverged or not len(self.history) else min(self.history.val_loss)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        out = self.model.predict(self.inputs.apply(embeddings))
        return out if self.targets is None else self.targets.invert(out)


def train_probes(emb: EmbeddingSet, cfg: ProbeConfig) -> list[ProbeRun]:
    """Train every predictor architecture on an 80/20 split of ``emb``.

    Embeddings (and, for positioning, targets) are standardised with
    training-split statistics. A diverging probe is recorded, not raised.
    """
    tr, va = _split(len(emb), cfg.val_fraction, cfg.seed)
    x = emb.embeddings
    xs = Standardizer.fit(x[tr])
    y = emb.labels
    ys = None
    if emb.task == "positioning":
        ys = Standardizer.fit(y[tr])
        y = ys.apply(y)
    x = xs.apply(x)
    runs = []
    for arch_id in range(len(PROBE_ARCHS)):
        model = build_predictor_mlp(arch_id, x.shape[1], emb.out_dim, seed=cfg.seed + 101 * arch_id)
        try:
            hist = fit_supervised(model, x[tr], y[tr], x[va], y[va], emb.task, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed + arch_id)
            runs.append(ProbeRun(arch_id, model, hist, xs, ys))
        except DivergenceError as exc:
            runs.append(ProbeRun(arch_id, model, exc.history, xs, ys, diverged=True))
    return runs


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_distance(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(pred - truth, axis=1)))


def score(task: str, pred: np.ndarray, labels: np.ndarray) -> float:
    return accuracy(pred, labels) if task == "classification" else mean_distance(pred, labels)


def test_best_probe(probes: list[ProbeRun], emb_test: EmbeddingSet) -> EvalResult:
    """Score the probe with the lowest validation loss (lowest arch_id on ties)."""
    losses = [p.best_val_loss for p in probes]
    usable = [i for i, v in enumerate(losses) if math.isfinite(v)]
    if not usable:
        raise RuntimeError("every probe diverged")
    best = min(usable, key=lambda i: (losses[i], probes[i].arch_id))
    pred = probes[best].predict(emb_test.embeddings)
    return EvalResult(METRICS[emb_test.task], score(emb_test.task, pred, emb_test.labels), probes[best].arch_id, losses)


# tell pytest the function above is not a test
test_best_probe.__test__ = False


# ---------------------------------------------------------------------------
# supervised reference CNN


def build_baseline_cnn(image_size: int, out_dim: int, channels: int = 3, seed: int = 0, hidden: int = 256) -> Model:
    """The image encoder's conv stack followed by one hidden dense layer and the output."""
    layers = []
    for w in ENCODER_WIDTHS[: encoder_blocks(image_size)]:
        layers += [LayerSpec("conv", w, 4, 2, 1), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", hidden), LayerSpec("relu"), LayerSpec("dense", out_dim)]
    return Model(layers, (channels, image_size, image_size), seed, name="baseline_cnn")


def train_baseline_cnn(train: Dataset, test: Dataset, cfg: ProbeConfig) -> tuple[Model, EvalResult]:
    """Train the reference CNN end to end on ``train`` (80/20) and score it on ``test``."""
    model = build_baseline_cnn(train.image_shape[1], train.out_dim, train.image_shape[0], cfg.seed)
    tr, va = _split(len(train), cfg.val_fraction, cfg.seed)
    y = train.labels
    ys = None
    if train.task == "positioning":
        ys = Standardizer.fit(y[tr])
        y = ys.apply(y)
    hist = fit_supervised(model, train.images[tr], y[tr], train.images[va], y[va], train.task, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed)
    pred = model.predict(test.images)
    if ys is not None:
        pred = ys.invert(pred)
    return model, EvalResult(METRICS[test.task], score(test.task, pred, test.labels), -1, [min(hist.val_loss)])


# ---------------------------------------------------------------------------
# aggregation


def aggregate_runs(results) -> tuple[float, float]:
    """Mean and uncorrected (divide-by-N) standard deviation of run metrics."""
    values = [r.value if isinstance(r, EvalResult) else float(r) for r in results]
    if not values:
        raise ValueError("aggregate_runs needs at least one result")
    a = np.asarray(values, dtype=np.float64)
    mean = float(a.mean())
    return mean, float(np.sqrt(np.mean((a - mean) ** 2)))


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"
