"""Minimal numpy layers with explicit forward/backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd(dout, cache)``
returns ``(dx, grads)`` where ``grads`` maps parameter names to gradients.
Parameters live in a flat ``dict[str, ndarray]`` keyed by dotted names.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def init_linear(params, name, din, dout, rng, scale=None):
    s = np.sqrt(2.0 / din) if scale is None else scale
    params[f"{name}.w"] = rng.normal(0.0, s, size=(din, dout))
    params[f"{name}.b"] = np.zeros(dout)


def init_conv(params, name, cin, cout, rng, scale=None):
    s = np.sqrt(2.0 / (9 * cin)) if scale is None else scale
    params[f"{name}.w"] = rng.normal(0.0, s, size=(cout, cin, 3, 3))
    params[f"{name}.b"] = np.zeros(cout)


def linear_fwd(x, params, name):
    w = params[f"{name}.w"]
    return x @ w + params[f"{name}.b"], (x, w, name)


def linear_bwd(dout, cache):
    x, w, name = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {f"{name}.w": x2.T @ d2, f"{name}.b": d2.sum(axis=0)}
    return dout @ w.T, grads


def relu_fwd(x):
    return np.maximum(x, 0.0), x > 0.0


def relu_bwd(dout, mask):
    return dout * mask


def _im2col(x):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)


def conv3x3_fwd(x, params, name):
    """3x3 convolution, stride 1, zero padding 1. ``x`` is ``(B, C, H, W)``."""
    w = params[f"{name}.w"]
    B, C, H, W = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + params[f"{name}.b"]
    out = out.reshape(B, H, W, -1).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, w, name)


def conv3x3_bwd(dout, cache):
    shape, cols, w, name = cache
    B, C, H, W = shape
    cout = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    grads = {f"{name}.w": (d2.T @ cols).reshape(w.shape), f"{name}.b": d2.sum(axis=0)}
    dcols = (d2 @ w.reshape(cout, -1)).reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + H, j:j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], grads


def conv3x3_apply(x, w, b):
    """Forward-only convolution with explicit weights (used by frozen stacks)."""
    B, C, H, W = x.shape
    out = _im2col(x) @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(B, H, W, -1).transpose(0, 3, 1, 2)


def instance_norm_fwd(x, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x - mu) * inv
    return xh, (xh, inv)


def instance_norm_bwd(dout, cache):
    xh, inv = cache
    n = xh.shape[2] * xh.shape[3]
    s1 = dout.sum(axis=(2, 3), keepdims=True)
    s2 = (dout * xh).sum(axis=(2, 3), keepdims=True)
    return inv * (dout - s1 / n - xh * s2 / n)


def layer_norm_fwd(x, params, name, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (x - mu) * inv
    g = params[f"{name}.g"]
    return xh * g + params[f"{name}.b"], (xh, inv, g, name)


def layer_norm_bwd(dout, cache):
    xh, inv, g, name = cache
    lead = tuple(range(dout.ndim - 1))
    grads = {f"{name}.g": (dout * xh).sum(axis=lead), f"{name}.b": dout.sum(axis=lead)}
    dxh = dout * g
    n = xh.shape[-1]
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).sum(axis=-1, keepdims=True) / n)
    return dx, grads


def maxpool2_fwd(x):
    B, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    win = x[:, :, :2 * h2, :2 * w2].reshape(B, C, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_bwd(dout, cache):
    shape, idx = cache
    B, C, H, W = shape
    h2, w2 = dout.shape[2:]
    win = np.zeros((B, C, h2, w2, 4))
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[:, :, :2 * h2, :2 * w2] = win.reshape(B, C, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h2, 2 * w2)
    return dx


def avgpool2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def gap_fwd(x):
    return x.mean(axis=(2, 3)), x.shape


def gap_bwd(dout, shape):
    n = shape[2] * shape[3]
    return np.broadcast_to(dout[:, :, None, None] / n, shape).copy()


def softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
