"""Network builders: image/feature codecs, the loss network and probe MLPs.

Models are plain ordered lists of :class:`LayerSpec` with their parameters
materialised as :class:`~fpbench.tensor.Tensor` leaves. A model can be
serialised to the ``FPBW`` weight container and rebuilt bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENCODER_WIDTHS = (32, 64, 128, 256)
LOSSNET_WIDTHS = (16, 32, 64)
FEATURE_HIDDEN = 2048
PROBE_ARCHS: tuple[tuple[int, ...], ...] = ((), (32,), (64,), (32, 32), (64, 32), (64, 64), (128, 128))
SUPPORTED_IMAGE_SIZES = (8, 16, 32, 64)

LAYER_KINDS = ("conv", "deconv", "dense", "relu", "sigmoid", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0  # kernel count or unit count
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    shape: tuple[int, ...] = ()  # reshape target, batch excluded

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", ()))
        return cls(**d)

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "deconv", "dense")


def _layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = spec.kind
    if kind in ("conv", "deconv"):
        if len(shape) != 3:
            raise T.ShapeError(f"{kind} needs a [C,H,W] input, got {list(shape)}")
        c, h, w = shape
        if kind == "conv":
            ho = T.conv_out_size(h, spec.kernel, spec.stride, spec.padding)
            wo = T.conv_out_size(w, spec.kernel, spec.stride, spec.padding)
        else:
            ho = T.deconv_out_size(h, spec.kernel, spec.stride, spec.padding)
            wo = T.deconv_out_size(w, spec.kernel, spec.stride, spec.padding)
        if ho < 1 or wo < 1:
            raise T.ShapeError(f"{kind} k{spec.kernel} s{spec.stride} p{spec.padding} does not fit input {list(shape)}")
        return (spec.out, ho, wo)
    if kind == "dense":
        if len(shape) != 1:
            raise T.ShapeError(f"dense needs a flat input, got {list(shape)}")
        return (spec.out,)
    if kind in ("relu", "sigmoid"):
        return shape
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "reshape":
        if math.prod(spec.shape) != math.prod(shape):
            raise T.ShapeError(f"cannot reshape {list(shape)} into {list(spec.shape)}")
        return tuple(spec.shape)
    raise ValueError(f"unknown layer kind {kind!r}")


class Model:
    """An ordered stack of layers with named, seeded parameters.

    ``tap`` optionally marks a layer index whose output is the model's
    feature-extraction point (see :func:`extract_features`).
    """

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        input_shape: Sequence[int],
        seed: int = 0,
        tap: int | None = None,
        name: str = "",
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.tap = tap
        self.name = name
        self.shapes = [self.input_shape]
        for spec in self.layers:
            self.shapes.append(_layer_output_shape(spec, self.shapes[-1]))
        if tap is not None and not 0 <= tap < len(self.layers):
            raise ValueError(f"tap index {tap} outside 0..{len(self.layers) - 1}")
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def _init_params(self, rng: np.random.Generator) -> None:
        for i, spec in enumerate(self.layers):
            if not spec.has_params:
                continue
            in_shape = self.shapes[i]
            nxt = next((l.kind for l in self.layers[i + 1:] if l.kind not in ("reshape", "flatten")), None)
            if spec.kind == "dense":
                shape = (in_shape[0], spec.out)
                fan_in, fan_out = in_shape[0], spec.out
            elif spec.kind == "conv":
                shape = (spec.out, in_shape[0], spec.kernel, spec.kernel)
                fan_in = in_shape[0] * spec.kernel ** 2
                fan_out = spec.out * spec.kernel ** 2
            else:
                shape = (in_shape[0], spec.out, spec.kernel, spec.kernel)
                # each output pixel sees about (k/s)^2 positions per input channel
                fan_in = max(1, in_shape[0] * spec.kernel ** 2 // spec.stride ** 2)
                fan_out = spec.out * spec.kernel ** 2
            if nxt == "relu":
                limit = math.sqrt(6.0 / fan_in)
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"{i}.weight"] = Tensor(rng.uniform(-limit, limit, size=shape), True, f"{i}.weight")
            self.params[f"{i}.bias"] = Tensor(np.zeros(spec.out), True, f"{i}.bias")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x, upto: int | None = None) -> Tensor:
        """Run layers ``0..upto`` inclusive (all layers when ``upto`` is None)."""
        x = T.as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"{self.name or 'model'} expects input {list(self.input_shape)}, got {list(x.shape[1:])}")
        last = len(self.layers) - 1 if upto is None else upto
        for i, spec in enumerate(self.layers[: last + 1]):
            kind = spec.kind
            if kind == "conv":
                x = T.conv2d(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"], spec.stride, spec.padding)
            elif kind == "deconv":
                x = T.deconv2d(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"], spec.stride, spec.padding)
            elif kind == "dense":
                x = T.dense(x, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
            elif kind in ("relu", "sigmoid"):
                x = T.activation(x, kind)
            elif kind == "flatten":
                x = T.flatten(x)
            else:
                x = T.reshape(x, (x.shape[0],) + spec.shape)
        return x

    def predict(self, x, batch_size: int = 256, upto: int | None = None) -> np.ndarray:
        """Untaped forward pass over ``x`` in fixed-size batches."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        outs = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                outs.append(self(x[s:s + batch_size], upto=upto).data)
        return np.concatenate(outs) if outs else np.zeros((0,) + self.shapes[(upto + 1) if upto is not None else -1])

    # parameter state --------------------------------------------------------

    def freeze(self) -> "Model":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise T.ShapeError(f"parameter {k}: stored {state[k].shape} vs model {p.shape}")
            p.data[...] = state[k]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()

    def to_spec(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "tap": self.tap,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_spec(cls, spec: dict) -> "Model":
        return cls(
            [LayerSpec.from_dict(d) for d in spec["layers"]],
            spec["input_shape"],
            seed=spec.get("seed", 0),
            tap=spec.get("tap"),
            name=spec.get("name", ""),
        )

    def __repr__(self) -> str:
        return f"Model({self.name!r}, {list(self.input_shape)} -> {list(self.output_shape)}, {self.num_parameters()} params)"


# ---------------------------------------------------------------------------
# builders


def encoder_blocks(image_size: int) -> int:
    """Number of stride-2 halvings from ``image_size`` down to 2, capped at 4."""
    if image_size not in SUPPORTED_IMAGE_SIZES:
        raise ValueError(f"unsupported image_size {image_size}; expected one of {SUPPORTED_IMAGE_SIZES}")
    return min(4, int(math.log2(image_size)) - 1)


def build_image_encoder(
    image_size: int, channels: int, z: int, seed: int = 0, widths: Sequence[int] = ENCODER_WIDTHS
) -> Model:
    """Stride-2 conv+relu blocks (kernel 4, padding 1, each halving the image)
    followed by a dense projection to ``z``."""
    if z < 1:
        raise ValueError("z must be >= 1")
    n = encoder_blocks(image_size)
    if len(widths) < n:
        raise ValueError(f"need {n} widths, got {len(widths)}")
    layers = []
    for w in widths[:n]:
        layers += [LayerSpec("conv", w, 4, 2, 1), LayerSpec("relu")]
    layers += [LayerSpec("flatten"), LayerSpec("dense", z)]
    return Model(layers, (channels, image_size, image_size), seed, name="image_encoder")


def build_image_decoder(
    image_size: int, channels: int, z: int, seed: int = 0, widths: Sequence[int] = ENCODER_WIDTHS
) -> Model:
    """Mirror of :func:`build_image_encoder` ending in a sigmoid."""
    if z < 1:
        raise ValueError("z must be >= 1")
    n = encoder_blocks(image_size)
    if len(widths) < n:
        raise ValueError(f"need {n} widths, got {len(widths)}")
    ws = list(widths[:n])
    s = image_size >> n
    layers = [LayerSpec("dense", ws[-1] * s * s), LayerSpec("relu"), LayerSpec("reshape", shape=(ws[-1], s, s))]
    outs = ws[-2::-1] + [channels]
    for i, w in enumerate(outs):
        layers.append(LayerSpec("deconv", w, 4, 2, 1))
        layers.append(LayerSpec("relu" if i < len(outs) - 1 else "sigmoid"))
    return Model(layers, (z,), seed, name="image_decoder")


def build_feature_codec(feature_dim: int, z: int, direction: str, seed: int = 0, hidden: int = FEATURE_HIDDEN) -> Model:
    """Single-hidden-layer MLP between feature space and the latent space."""
    if feature_dim < 1 or z < 1:
        raise ValueError("feature_dim and z must be >= 1")
    if direction == "encode":
        layers = [LayerSpec("dense", hidden), LayerSpec("relu"), LayerSpec("dense", z)]
        return Model(layers, (feature_dim,), seed, name="feature_encoder")
    if direction == "decode":
        layers = [LayerSpec("dense", hidden), LayerSpec("relu"), LayerSpec("dense", feature_dim), LayerSpec("sigmoid")]
        return Model(layers, (z,), seed, name="feature_decoder")
    raise ValueError(f"direction must be 'encode' or 'decode', got {direction!r}")


def build_loss_network(
    image_size: int,
    num_classes: int,
    channels: int = 3,
    seed: int = 0,
    widths: Sequence[int] = LOSSNET_WIDTHS,
    kernel: int | None = None,
) -> Model:
    """Small valid-convolution classifier whose second ReLU is the feature tap.

    ``kernel`` defaults to 4, or 2 for images under 16 pixels. The third
    convolution shrinks its kernel when the tapped map is smaller than it.
    """
    k = kernel if kernel is not None else (4 if image_size >= 16 else 2)
    s1 = T.conv_out_size(image_size, k, 2)
    s2 = T.conv_out_size(s1, k, 2)
    if s2 < 1:
        raise ValueError(f"image_size {image_size} too small for a kernel-{k} loss network")
    k3 = min(k, s2)
    layers = [
        LayerSpec("conv", widths[0], k, 2),
        LayerSpec("relu"),
        LayerSpec("conv", widths[1], k, 2),
        LayerSpec("relu"),
        LayerSpec("conv", widths[2], k3, 2),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", num_classes),
    ]
    return Model(layers, (channels, image_size, image_size), seed, tap=3, name="loss_network")


def feature_dim(lossnet: Model) -> int:
    if lossnet.tap is None:
        raise ValueError("loss network has no recorded tap point")
    return math.prod(lossnet.shapes[lossnet.tap + 1])


def extract_features(lossnet: Model, images) -> Tensor:
    """Sigmoid-normalised activations at the loss network's tap, flattened to [N, M].

    Taped whenever the images require gradients, so losses can back-propagate
    through the (frozen) loss network.
    """
    if lossnet.tap is None:
        raise ValueError("loss network has no recorded tap point")
    images = T.as_tensor(images)
    return T.sigmoid(T.flatten(lossnet(images, upto=lossnet.tap)))


def build_predictor_mlp(arch_id: int, z: int, out_dim: int, seed: int = 0) -> Model:
    if not 0 <= arch_id < len(PROBE_ARCHS):
        raise ValueError(f"arch_id must be in 0..{len(PROBE_ARCHS) - 1}, got {arch_id}")
    layers = []
    for h in PROBE_ARCHS[arch_id]:
        layers += [LayerSpec("dense", h), LayerSpec("relu")]
    layers.append(LayerSpec("dense", out_dim))
    return Model(layers, (z,), seed, name=f"probe{arch_id}")


# ---------------------------------------------------------------------------
# weight container

MAGIC = b"FPBW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


class WeightFormatError(ValueError):
    """Base class for unreadable weight files."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


def weights_to_bytes(model: Model) -> bytes:
    spec = json.dumps(model.to_spec(), sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(p.data.astype("<f8").tobytes() for p in model.params.values())
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(spec)) + spec + body


def weights_from_bytes(blob: bytes) -> Model:
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"file holds {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, spec_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} unsupported (expected {FORMAT_VERSION})")
    start = _HEADER.size + spec_len
    if len(blob) < start:
        raise TruncatedFileError(f"model spec needs {spec_len} bytes, only {len(blob) - _HEADER.size} present")
    model = Model.from_spec(json.loads(blob[_HEADER.size:start]))
    expected = start + 8 * model.num_parameters()
    if len(blob) != expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(blob)}")
    off = start
    for p in model.params.values():
        n = p.size
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(p.shape)
        off += 8 * n
    return model


def save_weights(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(weights_to_bytes(model))
    tmp.replace(path)


def load_weights(path) -> Model:
    return weights_from_bytes(Path(path).read_bytes())
