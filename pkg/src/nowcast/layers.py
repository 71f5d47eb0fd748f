"""NHWC array primitives with explicit backward passes.

Every ``*_forward`` returns its output plus whatever the matching
``*_backward`` needs.  Arrays are ``(batch, height, width, channels)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))           # N,H,W,C,k,k
    n, h, w, c = x.shape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, k * k * c)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 'same' convolution; ``w`` is ``(k, k, c_in, c_out)``, k odd."""
    k, _, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"expected {cin} input channels, got {x.shape[-1]}")
    n, h, wd, _ = x.shape
    cols = x.reshape(-1, cin) if k == 1 else _im2col(x, k)
    y = cols @ w.reshape(-1, cout) + b
    return y.reshape(n, h, wd, cout), cols


def conv_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    k, _, cin, cout = w.shape
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = dy2 @ w.reshape(-1, cout).T
    n, h, wd, _ = x_shape
    if k == 1:
        return dcols.reshape(x_shape), dw, db
    p = k // 2
    dcols = dcols.reshape(n, h, wd, k, k, cin)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + wd] += dcols[:, :, :, i, j]
    return dxp[:, p:p + h, p:p + wd], dw, db


def film_forward(x, gamma, beta):
    """Per-sample, per-channel ``gamma * x + beta``; gamma/beta are ``(N, C)``."""
    return x * gamma[:, None, None, :] + beta[:, None, None, :]


def film_backward(dy, x, gamma):
    dgamma = np.einsum("nhwc,nhwc->nc", dy, x)
    dbeta = dy.sum(axis=(1, 2))
    return dy * gamma[:, None, None, :], dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, y):
    return np.where(y > 0, dy, 0).astype(dy.dtype)


def crop(x, c: int):
    if c == 0:
        return x
    return x[:, c:-c, c:-c]


def crop_backward(dy, c: int):
    if c == 0:
        return dy
    return np.pad(dy, ((0, 0), (c, c), (c, c), (0, 0)))


def upsample_repeat(x, f: int):
    if f == 1:
        return x
    return np.repeat(np.repeat(x, f, axis=1), f, axis=2)


def upsample_repeat_backward(dy, f: int):
    if f == 1:
        return dy
    n, h, w, c = dy.shape
    return dy.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4))


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def masked_cross_entropy(logits, classes, mask):
    """Mean negative log-probability of ``classes`` over ``mask``.

    Returns ``(loss, dlogits)``; with no valid pixel both are zero.
    """
    mask = np.asarray(mask, bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, classes[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = -float(picked[mask].sum(dtype=np.float64)) / n
    d = np.exp(logp)
    np.put_along_axis(d, classes[..., None].astype(np.intp),
                      np.take_along_axis(d, classes[..., None].astype(np.intp), axis=-1) - 1, axis=-1)
    d *= (mask[..., None] / n).astype(d.dtype)
    return loss, d
