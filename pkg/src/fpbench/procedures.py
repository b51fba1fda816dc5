"""The six autoencoder pretraining procedures and their training loop.

Procedures are named ``<encoder>-<decoder>-<loss>`` where ``I`` means image
and ``F`` means loss-network features:

========  =======  =======  =====================
name      encodes  decodes  loss
========  =======  =======  =====================
I-I-PW    image    image    pixel-wise
I-I-PS    image    image    perceptual similarity
F-I-PW    feature  image    pixel-wise
F-I-PS    feature  image    perceptual similarity
I-F-FP    image    feature  feature prediction
F-F-FP    feature  feature  feature prediction
========  =======  =======  =====================
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .losses import LossKind, feature_prediction_loss, perceptual_similarity_loss, pixelwise_loss
from .nets import (
    Model,
    build_feature_codec,
    build_image_decoder,
    build_image_encoder,
    extract_features,
    feature_dim,
)

log = logging.getLogger(__name__)

_TABLE = {
    "I-I-PW": ("image", "image", "pixel_wise"),
    "I-I-PS": ("image", "image", "perceptual_similarity"),
    "F-I-PW": ("feature", "image", "pixel_wise"),
    "F-I-PS": ("feature", "image", "perceptual_similarity"),
    "I-F-FP": ("image", "feature", "feature_prediction"),
    "F-F-FP": ("feature", "feature", "feature_prediction"),
}
PROCEDURE_NAMES = tuple(_TABLE)


@dataclass(frozen=True)
class ProcedureSpec:
    name: str
    encoder_input: str
    decoder_output: str
    loss: LossKind

    def __post_init__(self):
        fp = self.loss.variant == "feature_prediction"
        if (self.decoder_output == "feature") != fp:
            raise ValueError(f"{self.name}: feature decoders pair exactly with feature-prediction loss")

    @property
    def needs_lossnet(self) -> bool:
        return self.encoder_input == "feature" or self.loss.needs_lossnet

    @property
    def caches_features(self) -> bool:
        """Whether p(X) is computed once up front instead of per batch."""
        return self.encoder_input == "feature" or self.loss.variant == "feature_prediction"


def make_procedure(name: str, f: str = "sse") -> ProcedureSpec:
    try:
        enc, dec, variant = _TABLE[name]
    except KeyError:
        raise ValueError(f"unknown procedure {name!r}; valid names: {', '.join(PROCEDURE_NAMES)}") from None
    return ProcedureSpec(name, enc, dec, LossKind(variant, f))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    z: int = 64
    seed: int = 0
    val_fraction: float = 0.2
    f: str = "sse"
    feature_hidden: int = 2048
    cache_spill_threshold: int = 200_000  # samples; larger feature caches go to a temp file


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)
    setup_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.val_loss)

    def append(self, train_loss: float, val_loss: float, wall: float) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.wall_seconds.append(wall)

    @property
    def best_epoch(self) -> int:
        """1-based epoch with the lowest validation loss (earliest on ties)."""
        if not self.val_loss:
            raise ValueError("empty history")
        return int(np.argmin(self.val_loss)) + 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.wall_seconds), 1):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(float(row["train_loss"]), float(row["val_loss"]), float(row["wall_seconds"]))
        return h


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``history`` holds the finite epochs."""

    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def split_train_val(data: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(data)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 1), n - 1)
    if n_val < 1:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def build_codec(spec: ProcedureSpec, image_shape, feat_dim: int | None, z: int, seed: int = 0, feature_hidden: int = 2048):
    """Fresh (encoder, decoder) pair for ``spec``."""
    c, h, _ = image_shape
    if spec.encoder_input == "image":
        enc = build_image_encoder(h, c, z, seed)
    else:
        enc = build_feature_codec(feat_dim, z, "encode", seed, hidden=feature_hidden)
    if spec.decoder_output == "image":
        dec = build_image_decoder(h, c, z, seed + 1)
    else:
        dec = build_feature_codec(feat_dim, z, "decode", seed + 1, hidden=feature_hidden)
    return enc, dec


def compute_features(lossnet: Model, images: np.ndarray, batch_size: int = 256, out: np.ndarray | None = None) -> np.ndarray:
    """Untaped p(X) for a whole image array, batch by batch."""
    m = feature_dim(lossnet)
    if out is None:
        out = np.empty((len(images), m))
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out[s:s + batch_size] = extract_features(lossnet, images[s:s + batch_size]).data
    return out


def _feature_cache(lossnet: Model, images: np.ndarray, threshold: int, batch_size: int):
    if len(images) <= threshold:
        return compute_features(lossnet, images, batch_size), None
    fd, name = tempfile.mkstemp(suffix=".npy", prefix="fpbench-features-")
    os.close(fd)
    arr = np.lib.format.open_memmap(name, mode="w+", dtype=np.float64, shape=(len(images), feature_dim(lossnet)))
    compute_features(lossnet, images, batch_size, out=arr)
    arr.flush()
    return arr, name


def procedure_loss(
    spec: ProcedureSpec,
    encoder: Model,
    decoder: Model,
    lossnet: Model | None,
    images: np.ndarray,
    features: np.ndarray | None = None,
) -> T.Tensor:
    """Loss of one batch. ``features`` is the cached p(X) for the batch; when
    omitted it is recomputed off the tape."""
    if spec.needs_lossnet and lossnet is None:
        raise ValueError(f"{spec.name} needs a loss network")
    if features is None and spec.caches_features:
        with T.no_grad():
            features = extract_features(lossnet, images).data
    code = encoder(features if spec.encoder_input == "feature" else images)
    out = decoder(code)
    variant, f = spec.loss.variant, spec.loss.f
    if variant == "pixel_wise":
        return pixelwise_loss(images, out, f)
    if variant == "perceptual_similarity":
        return perceptual_similarity_loss(lossnet, images, out, f, target=features)
    return feature_prediction_loss(features, out, f)


def evaluate_loss(spec, encoder, decoder, lossnet, images, features=None, batch_size: int = 64) -> float:
    """Mean per-sample loss over ``images`` without taping."""
    total = 0.0
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            fb = None if features is None else features[s:s + batch_size]
            total += procedure_loss(spec, encoder, decoder, lossnet, images[s:s + batch_size], fb).item()
    return total / len(images)


def pretrain(spec: ProcedureSpec, data: Dataset, lossnet: Model | None, cfg: TrainConfig, patience: int | None = None):
    """Train an autoencoder for ``spec``; returns ``(encoder, decoder, history)``
    with parameters restored from the lowest-validation-loss epoch."""
    if cfg.epochs < 1:
        raise ValueError("cfg.epochs must be >= 1")
    if patience is not None and patience < 1:
        raise ValueError("patience must be >= 1")
    if spec.needs_lossnet and lossnet is None:
        raise ValueError(f"{spec.name} needs a loss network")
    if lossnet is not None:
        lossnet.freeze()
    train, val = split_train_val(data, cfg.val_fraction, cfg.seed)
    history = TrainHistory()

    t0 = time.perf_counter()
    spill: list[str] = []
    ftrain = fval = None
    if spec.caches_features:
        ftrain, name = _feature_cache(lossnet, train.images, cfg.cache_spill_threshold, 256)
        spill += [name] if name else []
        fval, name = _feature_cache(lossnet, val.images, cfg.cache_spill_threshold, 256)
        spill += [name] if name else []
    history.setup_seconds = time.perf_counter() - t0

    fdim = feature_dim(lossnet) if lossnet is not None and lossnet.tap is not None else None
    encoder, decoder = build_codec(spec, data.image_shape, fdim, cfg.z, cfg.seed, cfg.feature_hidden)
    params = encoder.parameters() + decoder.parameters()
    for p in params:
        p.zero_grad()
    state = T.AdamState()
    rng = np.random.default_rng(cfg.seed + 1)
    best_val, best_state, since_best = math.inf, None, 0
    n = len(train)

    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            perm = rng.permutation(n)
            total = 0.0
            try:
                for s in range(0, n, cfg.batch_size):
                    idx = perm[s:s + cfg.batch_size]
                    fb = None if ftrain is None else ftrain[idx]
                    loss = procedure_loss(spec, encoder, decoder, lossnet, train.images[idx], fb)
                    T.backward(loss)
                    T.optimizer_step(params, state, cfg.lr)
                    total += loss.item()
                val_loss = evaluate_loss(spec, encoder, decoder, lossnet, val.images, fval, cfg.batch_size)
            except T.NonFiniteError as exc:
                raise DivergenceError(f"{spec.name} diverged in epoch {epoch + 1}: {exc}", history) from exc
            train_loss = total / n
            if not (math.isfinite(val_loss) and math.isfinite(train_loss)):
                raise DivergenceError(f"{spec.name} diverged in epoch {epoch + 1}", history)
            history.append(train_loss, val_loss, time.perf_counter() - start)
            log.debug("%s epoch %d train %.6g val %.6g", spec.name, epoch + 1, train_loss, val_loss)
            if val_loss < best_val:
                best_val, since_best = val_loss, 0
                best_state = (encoder.state(), decoder.state())
            else:
                since_best += 1
                if patience is not None and since_best >= patience:
                    break
    finally:
        for name in spill:
            Path(name).unlink(missing_ok=True)

    encoder.load_state(best_state[0])
    decoder.load_state(best_state[1])
    return encoder, decoder, history


def pretrain_with_patience(spec, data, lossnet, cfg: TrainConfig, patience: int = 15):
    """:func:`pretrain` with early stopping once ``patience`` epochs pass without
    a better validation loss; ``cfg.epochs`` remains a hard cap."""
    return pretrain(spec, data, lossnet, cfg, patience=patience)


def procedure_grad_check(
    spec, encoder, decoder, lossnet, images, eps: float = 1e-3, max_entries: int | None = None, report: dict | None = None
) -> float:
    """Finite-difference check of a procedure's full loss graph over codec parameters."""
    images = np.asarray(images, dtype=np.float64)
    if lossnet is not None:
        lossnet.freeze()
    features = None
    if spec.caches_features:
        with T.no_grad():
            features = extract_features(lossnet, images).data
    return T.check_gradients(
        lambda: procedure_loss(spec, encoder, decoder, lossnet, images, features),
        encoder.parameters() + decoder.parameters(),
        eps,
        max_entries,
        report=report,
    )
