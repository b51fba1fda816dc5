"""Pixel-wise, perceptual-similarity and feature-prediction losses.

All three sum an elementwise loss ``f(target_k, prediction_k)``:

* pixel-wise: over the image pixels, ``f(X, de(en(X)))``
* perceptual similarity: over loss-network features, ``f(p(X), p(de(en(X))))``
* feature prediction: over loss-network features, ``f(p(X), de(en(X)))``
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .nets import Model, extract_features
from .tensor import Tensor

VARIANTS = ("pixel_wise", "perceptual_similarity", "feature_prediction")
ELEMENTWISE = {"sse": T.sse, "bce": T.bce}


@dataclass(frozen=True)
class LossKind:
    variant: str
    f: str = "sse"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.f not in ELEMENTWISE:
            raise ValueError(f"unknown elementwise loss {self.f!r}; expected one of {tuple(ELEMENTWISE)}")

    @property
    def needs_lossnet(self) -> bool:
        return self.variant != "pixel_wise"


def _elementwise(f: str):
    try:
        return ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise loss {f!r}") from None


def pixelwise_loss(x, x_hat: Tensor, f: str = "sse") -> Tensor:
    return _elementwise(f)(T.as_tensor(x), x_hat)


def perceptual_similarity_loss(lossnet: Model | None, x, x_hat: Tensor, f: str = "sse", target: Tensor | None = None) -> Tensor:
    """Compare loss-network features of ``x`` and of the reconstruction.

    ``p(x)`` is evaluated off the tape (or taken from ``target`` when the
    caller has it cached); ``p(x_hat)`` is taped so gradients reach the codec
    through the frozen loss network.
    """
    if lossnet is None:
        raise ValueError("perceptual similarity loss needs a bound loss network")
    if target is None:
        with T.no_grad():
            target = extract_features(lossnet, x)
    return _elementwise(f)(target, extract_features(lossnet, x_hat))


def feature_prediction_loss(y, y_hat: Tensor, f: str = "sse") -> Tensor:
    """Compare precomputed features ``y`` with the decoder's direct prediction."""
    return _elementwise(f)(T.as_tensor(y), y_hat)
