"""Differentiable layers used by the DenseNet backbone and the classification head.

All image ops take NCHW tensors. Convolution is im2col followed by a single
matmul; pooling reuses the same window view.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, add, make_op, matmul

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H', W', kh, kw) view into the padded input
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _scatter_windows(g_win: np.ndarray, padded_shape, kh: int, kw: int, stride: int, pad: int):
    """Inverse of ``_windows``: accumulate (N, C, H', W', kh, kw) back into the input."""
    n, c, oh, ow = g_win.shape[:4]
    dxp = np.zeros(padded_shape, dtype=g_win.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g_win[:, :, :, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H'*W', C*kh*kw), rows ordered (n, y, x)."""
    win = _windows(_pad(x, pad), kh, kw, stride)
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h}x{wd} (pad {pad})")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)

    cols = im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    padded_shape = (n, cin, h + 2 * pad, wd + 2 * pad)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dx = _scatter_windows(dcols, padded_shape, kh, kw, stride, pad)
        return dx, dw

    return make_op("conv2d", np.ascontiguousarray(out), (x, w), backward)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise ValueError("batch norm epsilon must be positive")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and folds them into the running averages
    (unbiased variance); eval mode uses the running averages and mutates nothing.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm: expected N×{state.channels}×H×W input, got {x.shape}")
    n, c, h, w = x.shape
    m = n * h * w
    axes = (0, 2, 3)
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)

    if train:
        if m < 2:
            raise ValueError("batch_norm: train mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[:] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std
    out = gamma * xhat + beta

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma
        if train:
            dx = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_op("batch_norm", out, (x, state.gamma, state.beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def pool2d(x: Tensor, kind: str, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max or average pooling over k×k windows. Max pads with -inf, avg with zeros."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"pool2d: window {k} exceeds padded input {h}x{w} (pad {pad})")
    fill = -np.inf if kind == "max" else 0.0
    xp = _pad(x.data, pad, fill)
    win = _windows(xp, k, k, stride)
    oh, ow = win.shape[2:4]

    if kind == "max":
        flat = win.reshape(n, c, oh, ow, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            onehot = (np.arange(k * k) == arg[..., None]) * g[..., None]
            return (_scatter_windows(onehot.reshape(n, c, oh, ow, k, k).astype(g.dtype),
                                     xp.shape, k, k, stride, pad),)
    else:
        out = win.mean(axis=(-2, -1))
        scale = x.dtype.type(1.0 / (k * k))

        def backward(g):
            spread = np.broadcast_to((g * scale)[..., None, None], (n, c, oh, ow, k, k))
            return (_scatter_windows(spread, xp.shape, k, k, stride, pad),)

    return make_op(f"{kind}_pool2d", np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    scale = x.dtype.type(1.0 / (h * w))
    return make_op(
        "global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),),
    )


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"dense: expected N×Cin input, got {x.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match {w.shape[1]} outputs")
    return add(matmul(x, w), b)


def check_dropout_rate(p: float) -> float:
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    return p


def dropout(
    x: Tensor,
    p: float,
    train: bool = True,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    p = check_dropout_rate(p)
    if not train or (p == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout: train mode needs a seeded rng or an explicit mask")
        mask = rng.random(x.shape) >= p
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} differs from input {x.shape}")
    scaled = mask.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_op("dropout", x.data * scaled, (x,), lambda g: (g * scaled,))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against one-hot ``labels``.

    Returns the scalar loss tensor and the probability matrix.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax_cross_entropy: expected N×K logits with K>=2, got {logits.shape}")
    if labels.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if not (np.isin(labels, (0, 1)).all() and (labels.sum(axis=1) == 1).all()):
        raise ValueError("softmax_cross_entropy: labels must be one-hot rows")
    n = logits.shape[0]
    onehot = labels.astype(logits.dtype)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    probs = np.exp(shifted - lse[:, None])
    loss = np.mean(lse - (shifted * onehot).sum(axis=1))
    scale = logits.dtype.type(1.0 / n)
    t = make_op(
        "softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,),
        lambda g: (g * (probs - onehot) * scale,),
    )
    return t, probs


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out
