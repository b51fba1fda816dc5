"""Minimal reverse-mode automatic differentiation on numpy float64 arrays.

Every differentiable operation produces a :class:`Tensor` that carries a
:class:`Node` describing how to push gradients back to its inputs. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaf tensors that require them.

A graph can be consumed only once: a second ``backward`` on the same loss
raises, which rules out silent double accumulation.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "no_grad",
    "is_grad_enabled",
    "trace",
    "backward",
    "conv2d",
    "deconv2d",
    "dense",
    "relu",
    "sigmoid",
    "activation",
    "reshape",
    "flatten",
    "sse",
    "bce",
    "softmax_cross_entropy",
    "AdamState",
    "optimizer_step",
    "check_gradients",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not compose."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN/Inf from finite inputs."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called on a graph that was already back-propagated."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients."""

    op: str
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    released: bool = field(default=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if __debug__ and not np.isfinite(out).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    if needs_grad:
        result.node = Node(op, inputs, backward_fn)
    return result


def trace(loss: Tensor) -> list[Node]:
    """Recorded nodes reachable from ``loss`` in topological order (inputs
    before the nodes that consume them)."""
    order: list[Node] = []
    seen: set[int] = set()
    if loss.node is None:
        return order
    stack: list[tuple[Node, bool]] = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` into every reachable leaf that
    requires a gradient. Gradients accumulate additively."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    nodes = trace(loss)
    if any(n.released for n in nodes):
        raise GraphConsumedError("graph already back-propagated; rebuild it before calling backward again")

    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}

    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        in_grads = node.backward_fn(g) if g is not None else [None] * len(node.inputs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad += gi
            else:
                key = id(t.node)
                grads[key] = gi if key not in grads else grads[key] + gi
        node.released = True
        node.backward_fn = None


# ---------------------------------------------------------------------------
# convolution machinery


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided [N, C, H', W', kh, kw] view of every receptive field of ``x``."""
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Receptive fields of ``x`` as rows of an [N*H'*W', C*kh*kw] matrix."""
    win = _windows(x, kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols_t: np.ndarray, shape: tuple[int, ...], out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Scatter-add patch contributions ``cols_t`` [C*kh*kw, N*H'*W'] into [N, C, H, W].

    ``shape`` is (C, kh, kw, N, H', W').
    """
    c, kh, kw, n, ho, wo = shape
    cols = cols_t.reshape(shape)
    out = np.zeros((c, n) + out_hw, dtype=DTYPE)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv_out_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_out_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size - 1) * stride + kernel - 2 * padding


def _conv2d_backward(g, cols, xp_shape, w, stride, padding, need_x=True, need_w=True):
    n, c, hp, wp = xp_shape
    k, _, kh, kw = w.shape
    gx = gw = gb = None
    if need_w:
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0)
    if need_x:
        cols_t = w.reshape(k, -1).T @ g.transpose(1, 0, 2, 3).reshape(k, -1)
        shape = (c, kh, kw, n, g.shape[2], g.shape[3])
        gx = np.ascontiguousarray(_crop(_col2im(cols_t, shape, (hp, wp), stride), padding))
    return gx, gw, gb


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``kernels`` [K,C,kh,kw].

    Output spatial size is ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d input channels C={c} != kernel channels {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != (K={k},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d stride={stride} / padding={padding} invalid")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d input H={h}, W={w} (padding {padding}) smaller than kernel {kh}x{kw}")

    xp = _pad(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wd = kernels.data
    out = (cols @ wd.reshape(k, -1).T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]
    need_x, need_w = x.requires_grad, kernels.requires_grad or bias.requires_grad

    def back(g):
        return _conv2d_backward(g, cols, xp.shape, wd, stride, padding, need_x, need_w)

    return _record("conv2d", out, (x, kernels, bias), back)


def _deconv2d_backward(g, x_mat, w, stride, padding, need_x=True, need_w=True):
    c, k, kh, kw = w.shape
    cols, h, wd = _im2col(_pad(g, padding), kh, kw, stride)  # [N*H*W, K*kh*kw]
    gx = gw = gb = None
    if need_w:
        gw = (x_mat @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
    if need_x:
        n = g.shape[0]
        gx = np.ascontiguousarray((cols @ w.reshape(c, -1).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
    return gx, gw, gb


def deconv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of ``x`` [N,C,H,W] with ``kernels`` [C,K,kh,kw].

    The adjoint of :func:`conv2d`; output size ``(H-1)*stride + kh - 2*padding``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"deconv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    n, c, h, w = x.shape
    kc, k, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"deconv2d input channels C={c} != kernel input channels {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"deconv2d bias shape {bias.shape} != (K={k},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"deconv2d stride={stride} / padding={padding} invalid")
    full = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    if full[0] <= 2 * padding or full[1] <= 2 * padding:
        raise ShapeError(f"deconv2d padding {padding} consumes the whole {full} output")

    wd = kernels.data
    x_mat = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    cols_t = wd.reshape(c, -1).T @ x_mat
    out = np.ascontiguousarray(_crop(_col2im(cols_t, (k, kh, kw, n, h, w), full, stride), padding))
    out += bias.data[None, :, None, None]
    need_x, need_w = x.requires_grad, kernels.requires_grad or bias.requires_grad

    def back(g):
        return _deconv2d_backward(g, x_mat, wd, stride, padding, need_x, need_w)

    return _record("deconv2d", out, (x, kernels, bias), back)


def _dense_backward(g, x, w, need_x=True, need_w=True):
    gx = g @ w.T if need_x else None
    if not need_w:
        return gx, None, None
    return gx, x.T @ g, g.sum(axis=0)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x [N,I], weight [I,O], bias [O]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input features I={x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != (O={weight.shape[1]},)")
    out = x.data @ weight.data + bias.data
    xd, wd = x.data, weight.data
    need_x, need_w = x.requires_grad, weight.requires_grad or bias.requires_grad
    return _record("dense", out, (x, weight, bias), lambda g: _dense_backward(g, xd, wd, need_x, need_w))


def _relu_backward(g, y):
    return (g * (y > 0),)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0)
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(np.packbits(x.data > 0).tobytes())
    return _record("relu", y, (x,), lambda g: _relu_backward(g, y))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _sigmoid_backward(g, y):
    return (g * y * (1.0 - y),)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: _sigmoid_backward(g, y))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")


def sse(a: Tensor, b: Tensor) -> Tensor:
    """Sum over all elements of ``(a - b)**2``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sse", a, b)
    diff = a.data - b.data
    out = np.array(np.dot(diff.ravel(), diff.ravel()))

    def back(g):
        ga = 2.0 * g * diff
        return ga, -ga

    return _record("sse", out, (a, b), back)


BCE_CLIP = 1e-12


def bce(target: Tensor, pred: Tensor) -> Tensor:
    """Summed binary cross-entropy of ``pred`` against ``target`` (both in [0,1])."""
    target, pred = as_tensor(target), as_tensor(pred)
    _check_same("bce", target, pred)
    t = target.data
    p = np.clip(pred.data, BCE_CLIP, 1.0 - BCE_CLIP)
    lp, lq = np.log(p), np.log1p(-p)
    out = np.array(-(t * lp + (1.0 - t) * lq).sum())

    def back(g):
        gt = -g * (lp - lq)
        gp = g * (p - t) / (p * (1.0 - p))
        return gt, gp

    return _record("bce", out, (target, pred), back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed categorical cross-entropy of integer ``labels`` under ``logits`` [N,K]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    out = np.array(-logp[rows, labels].sum())

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d,)

    return _record("softmax_cross_entropy", out, (logits,), back)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place, then zero the grads."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} params, got {len(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1 ** state.t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= inv_c2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p.data -= tmp
        g.fill(0.0)


# ---------------------------------------------------------------------------
# finite-difference verification


@contextlib.contextmanager
def _record_kinks() -> Iterator[list]:
    """Collect the ReLU activation pattern of every forward pass in the block."""
    prev = getattr(_state, "kinks", None)
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


def _value_and_pattern(loss_fn: Callable[[], Tensor]) -> tuple[float, bytes]:
    with no_grad(), _record_kinks() as log:
        value = loss_fn().item()
    return value, b"".join(log)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    report: dict | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    ``max_entries`` limits the number of checked coordinates per parameter
    (chosen with ``seed``); ``None`` checks every coordinate.

    A coordinate whose +-eps step flips any ReLU on or off straddles a kink,
    where central differences do not estimate the derivative; it is skipped.
    ``report``, if given, receives ``checked`` and ``skipped`` counts.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    _, base = _value_and_pattern(loss_fn)
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for p in params:
        analytic = p.grad.ravel().copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up, up_pattern = _value_and_pattern(loss_fn)
            flat[i] = orig - eps
            down, down_pattern = _value_and_pattern(loss_fn)
            flat[i] = orig
            if up_pattern != base or down_pattern != base:
                skipped += 1
                continue
            checked += 1
            num = (up - down) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    if report is not None:
        report.update(checked=checked, skipped=skipped)
    return worst


def grad_check(
    model, x, target, loss: str = "sse", eps: float = 1e-3, max_entries: int | None = None, report: dict | None = None
) -> float:
    """Gradient check of ``loss(target, model(x))`` over every model parameter."""
    f = {"sse": sse, "bce": bce}[loss]
    target = as_tensor(target)
    return check_gradients(lambda: f(target, model(x)), model.parameters(), eps, max_entries, report=report)
