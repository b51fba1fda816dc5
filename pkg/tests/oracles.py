"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the engine: these are plain loops over numpy arrays.
"""

import numpy as np


def conv2d_loops(x, k, b, stride, padding=0):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    kk, _, kh, kw = k.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, kk, ho, wo))
    for s in range(n):
        for o in range(kk):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[s, ci, i * stride + p, j * stride + q] * k[o, ci, p, q]
                    out[s, o, i, j] = acc
    return out


def deconv2d_loops(x, k, b, stride, padding=0):
    n, c, h, w = x.shape
    _, kk, kh, kw = k.shape
    ho = (h - 1) * stride + kh
    wo = (w - 1) * stride + kw
    out = np.zeros((n, kk, ho, wo))
    for s in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    for o in range(kk):
                        for p in range(kh):
                            for q in range(kw):
                                out[s, o, i * stride + p, j * stride + q] += x[s, ci, i, j] * k[ci, o, p, q]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out + b[None, :, None, None]


def sse_loops(a, b):
    total = 0.0
    for u, v in zip(np.ravel(a), np.ravel(b)):
        total += (u - v) * (u - v)
    return total


def sigmoid_scalar(v):
    return 1.0 / (1.0 + np.exp(-v))


def central_difference(fn, arr, eps):
    """Numeric gradient of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        g[i] = (up - down) / (2 * eps)
    return grad


def bce_loops(target, pred):
    total = 0.0
    for t, p in zip(np.ravel(target), np.ravel(pred)):
        total -= t * np.log(p) + (1.0 - t) * np.log(1.0 - p)
    return total


def one_layer_features(x, k, b, stride=1):
    """sigmoid(relu(conv(x))) flattened per sample, all by loops."""
    out = conv2d_loops(x, k, b, stride)
    n = out.shape[0]
    flat = out.reshape(n, -1)
    feats = np.zeros_like(flat)
    for s in range(n):
        for i in range(flat.shape[1]):
            feats[s, i] = sigmoid_scalar(max(flat[s, i], 0.0))
    return feats
