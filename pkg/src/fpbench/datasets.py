"""Synthetic image datasets and a raw-binary importer.

Two procedural generators stand in for real data:

* ``gen_sprite_dataset`` lifts a small lander-like sprite out of a smooth
  random background; the label is the sprite centre in pixels.
* ``gen_shapes_dataset`` renders one of up to ten glyph classes the same
  way, with random placement, scale, rotation and background noise.

``load_raw``/``save_raw`` read and write a header-less ``u8`` pixel blob
followed by a label blob (layout in ``docs/raw_format.md``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TASKS = ("classification", "positioning")
ROLES = ("pretrain", "probe_train", "probe_test")
LABEL_KINDS = ("class_u8", "position_f32")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64 classes or [N, 2] float64 (x, y) pixel positions
    task: str
    role: str = "pretrain"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        n, _, h, w = self.images.shape
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.task == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"class labels must have shape ({n},), got {self.labels.shape}")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"class labels must lie in [0, {self.num_classes})")
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (n, 2):
                raise ValueError(f"position labels must have shape ({n}, 2), got {self.labels.shape}")
            if n and not (
                np.isfinite(self.labels).all()
                and (self.labels[:, 0] >= 0).all() and (self.labels[:, 0] <= w).all()
                and (self.labels[:, 1] >= 0).all() and (self.labels[:, 1] <= h).all()
            ):
                raise ValueError("position labels must be finite and inside the image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 2

    def subset(self, idx, role: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.task, role or self.role, self.num_classes)


# ---------------------------------------------------------------------------
# sprite (positioning) data

_LANDER = np.array(
    [
        [0, 1, 1, 0],
        [1, 1, 1, 1],
        [1, 1, 1, 1],
        [1, 0, 0, 1],
    ],
    dtype=bool,
)


def sprite_mask(size: int) -> np.ndarray:
    """Boolean sprite footprint of width ``size // 8``."""
    w = size // 8
    if w >= 4:
        return np.kron(_LANDER, np.ones((w // 4, w // 4), dtype=bool))
    return np.ones((w, w), dtype=bool)


def smooth_field(rng: np.random.Generator, size: int, channels: int, bumps: int = 8, width=(0.15, 0.4)) -> np.ndarray:
    """Sum of random Gaussian bumps, min-max rescaled per channel to [0, 0.5].

    Low-frequency and edge-free: a lot of pixel energy for an autoencoder to
    spend capacity on, but little for an edge/blob detector to respond to.
    """
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for _ in range(bumps):
        cx, cy = rng.uniform(-0.2, 1.2, size=2)
        r = rng.uniform(*width)
        amp = rng.normal(size=channels)
        img += amp[:, None, None] * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))[None]
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return 0.5 * (img - lo) / (hi - lo + 1e-12)


SPRITE_LIFT = 0.5  # added to every channel under the sprite


def sprite_background(seed: int, i: int, size: int, channels: int = 3) -> np.ndarray:
    """Background of image ``i`` in ``gen_sprite_dataset(..., seed=seed)``."""
    return smooth_field(np.random.default_rng([seed, i]), size, channels)


def gen_sprite_dataset(n: int, size: int = 32, seed: int = 0, channels: int = 3) -> Dataset:
    """Positioning data: a lander-like sprite at a uniformly random in-bounds spot.

    The background is a smooth random field in [0, 0.5] and the sprite lifts
    every channel by 0.5. It is easy to see but carries little squared-error
    mass, which is what makes pixel-wise reconstruction ignore it.

    Labels are sprite centres ``(x, y)`` in pixels, so with sprite width
    ``w = size // 8`` they lie in ``[w/2, size - w/2]``.
    """
    if size < 16:
        raise ValueError("sprite images need size >= 16")
    rng = np.random.default_rng(seed)
    mask = sprite_mask(size)
    w = mask.shape[0]
    corners = rng.integers(0, size - w + 1, size=(n, 2))  # top-left (col, row)
    images = np.empty((n, channels, size, size))
    for i in range(n):
        img = sprite_background(seed, i, size, channels)
        c, r = corners[i]
        img[:, r:r + w, c:c + w][:, mask] += SPRITE_LIFT
        images[i] = img
    labels = corners.astype(np.float64) + w / 2.0
    return Dataset(images, labels, "positioning")


# ---------------------------------------------------------------------------
# shapes (classification) data

SHAPE_NAMES = ("disk", "square", "triangle", "x_cross", "plus", "ring", "hbar", "vbar", "ell", "half_disk")


def _glyph(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    box = np.maximum(np.abs(u), np.abs(v))
    if cls == 0:
        return r < 0.8
    if cls == 1:
        return box < 0.7
    if cls == 2:
        return (v < 0.6) & (np.abs(u) < (v + 0.8) * 0.55)
    if cls == 3:
        return (np.minimum(np.abs(u - v), np.abs(u + v)) < 0.3) & (box < 0.8)
    if cls == 4:
        return ((np.abs(u) < 0.22) | (np.abs(v) < 0.22)) & (box < 0.8)
    if cls == 5:
        return (r > 0.45) & (r < 0.85)
    if cls == 6:
        return (np.abs(v) < 0.25) & (np.abs(u) < 0.85)
    if cls == 7:
        return (np.abs(u) < 0.25) & (np.abs(v) < 0.85)
    if cls == 8:
        return ((u > -0.8) & (u < -0.35) & (np.abs(v) < 0.8)) | ((v > 0.35) & (v < 0.8) & (np.abs(u) < 0.8))
    if cls == 9:
        return (r < 0.85) & (v > 0.0)
    raise ValueError(cls)


def gen_shapes_dataset(n: int, size: int = 32, num_classes: int = 10, seed: int = 0, channels: int = 3) -> Dataset:
    """Classification data with an exactly balanced (up to n % num_classes) class histogram."""
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in 1..{len(SHAPE_NAMES)}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, channels, size, size))
    for i in range(n):
        scale = rng.uniform(0.25, 0.8)
        theta = rng.uniform(-np.pi / 9, np.pi / 9)
        lim = max(0.0, 0.9 - scale)
        dx, dy = rng.uniform(-lim, lim, size=2)
        cos, sin = np.cos(theta), np.sin(theta)
        x0, y0 = (gx - dx) / scale, (gy - dy) / scale
        u = cos * x0 + sin * y0
        v = -sin * x0 + cos * y0
        mask = _glyph(int(labels[i]), u, v)
        bg = smooth_field(rng, size, channels, bumps=int(rng.integers(2, 17)))
        noise = rng.uniform(0.0, rng.uniform(0.02, 0.15), size=(channels, size, size))
        images[i] = np.clip(bg + noise + SPRITE_LIFT * mask[None], 0.0, 1.0)
    return Dataset(images, labels, "classification", num_classes=num_classes)


# ---------------------------------------------------------------------------
# raw binary import / export


@dataclass(frozen=True)
class RawMeta:
    n: int
    c: int
    h: int
    w: int
    label_kind: str  # "class_u8" or "position_f32"
    num_classes: int = 10

    def label_bytes(self) -> int:
        if self.label_kind == "class_u8":
            return self.n
        if self.label_kind == "position_f32":
            return self.n * 2 * 4
        raise ValueError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")

    def pixel_bytes(self) -> int:
        return self.n * self.c * self.h * self.w


class RawSizeError(ValueError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"raw file size mismatch: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


def load_raw(path, meta: RawMeta | dict, role: str = "pretrain") -> Dataset:
    if isinstance(meta, dict):
        meta = RawMeta(**meta)
    blob = Path(path).read_bytes()
    npix = meta.pixel_bytes()
    expected = npix + meta.label_bytes()
    if len(blob) != expected:
        raise RawSizeError(expected, len(blob))
    pixels = np.frombuffer(blob, dtype=np.uint8, count=npix).reshape(meta.n, meta.c, meta.h, meta.w)
    images = pixels.astype(np.float64) / 255.0
    if meta.label_kind == "class_u8":
        labels = np.frombuffer(blob, dtype=np.uint8, offset=npix).astype(np.int64)
        return Dataset(images, labels, "classification", role, meta.num_classes)
    labels = np.frombuffer(blob, dtype="<f4", offset=npix).reshape(meta.n, 2).astype(np.float64)
    return Dataset(images, labels, "positioning", role)


def save_raw(data: Dataset, path) -> RawMeta:
    """Write ``data`` in the raw layout (pixels quantised to u8) and return its metadata."""
    n, c, h, w = data.images.shape
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    if data.task == "classification":
        if data.num_classes > 256:
            raise ValueError("class_u8 labels hold at most 256 classes")
        meta = RawMeta(n, c, h, w, "class_u8", data.num_classes)
        labels = data.labels.astype(np.uint8).tobytes()
    else:
        meta = RawMeta(n, c, h, w, "position_f32")
        labels = data.labels.astype("<f4").tobytes()
    Path(path).write_bytes(pixels.tobytes() + labels)
    return meta


# ---------------------------------------------------------------------------
# roles


def assign_roles(pretrain_n: int, probe_train_n: int, probe_test_n: int, source: Dataset, seed: int = 0):
    """Disjoint pretrain / probe-train / probe-test subsets drawn by a seeded shuffle."""
    total = pretrain_n + probe_train_n + probe_test_n
    if min(pretrain_n, probe_train_n, probe_test_n) < 0:
        raise ValueError("subset sizes must be non-negative")
    if total > len(source):
        raise ValueError(f"need {total} samples, source has {len(source)}")
    perm = np.random.default_rng(seed).permutation(len(source))
    a, b = pretrain_n, pretrain_n + probe_train_n
    return (
        source.subset(perm[:a], "pretrain"),
        source.subset(perm[a:b], "probe_train"),
        source.subset(perm[b:total], "probe_test"),
    )
