"""Forward and backward kernels for the layer primitives.

All functions are pure: they read their inputs and return fresh arrays.
Backward functions take the same arguments the forward pass consumed
(convolutions only need the cached input and weight), so callers decide
what to keep around.

Convolutions use "same" zero padding ``(k - 1) // 2`` and no bias.
Float reductions run in a fixed order (kernel offsets ascending, then
BLAS matmul), so results are deterministic for a given numpy/BLAS build.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import channel_concat, channel_split, check_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ConvSpec(NamedTuple):
    k: int
    stride: int = 1

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2

    def out_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.k) // self.stride + 1


def _check_kernel(k: int, stride: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _window(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _im2col(x: np.ndarray, k: int, s: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (n, c*k*k, ho*wo), channel-major then kernel row/col."""
    n, c, h, w = x.shape
    spec = ConvSpec(k, s)
    ho, wo = spec.out_size(h), spec.out_size(w)
    if k == 1:
        cols = x if s == 1 else x[:, :, ::s, ::s]
        return np.ascontiguousarray(cols).reshape(n, c, ho * wo), ho, wo
    win = sliding_window_view(_pad(x, spec.pad), (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


# -- standard / pointwise convolution -------------------------------------

def conv2d_fwd(x: np.ndarray, weight: np.ndarray, stride: int = 1) -> np.ndarray:
    d_j, d_i, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    _check_kernel(k, stride)
    if x.shape[1] != d_i:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {d_i}")
    cols, ho, wo = _im2col(x, k, stride)
    y = np.matmul(weight.reshape(d_j, d_i * k * k), cols)
    return check_finite(y.reshape(x.shape[0], d_j, ho, wo), "conv2d")


def conv2d_bwd(dy: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1):
    """Returns (dx, dweight)."""
    d_j, d_i, k, _ = weight.shape
    n, _, h, w = x.shape
    cols, ho, wo = _im2col(x, k, stride)
    dy2 = dy.reshape(n, d_j, ho * wo)
    dweight = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    dcols = np.matmul(weight.reshape(d_j, -1).T, dy2).reshape(n, d_i, k, k, ho, wo)
    p = (k - 1) // 2
    dxp = np.zeros((n, d_i, h + 2 * p, w + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            _window(dxp, i, j, stride, ho, wo)[...] += dcols[:, :, i, j]
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(dx), dweight


def pointwise_fwd(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    if weight.shape[2:] != (1, 1):
        raise ValueError(f"pointwise weight must be (d_j, d_i, 1, 1), got {weight.shape}")
    return conv2d_fwd(x, weight, 1)


def pointwise_bwd(dy, x, weight):
    return conv2d_bwd(dy, x, weight, 1)


# -- depthwise --------------------------------------------------------------

def depthwise_fwd(x: np.ndarray, weight: np.ndarray, stride: int = 1) -> np.ndarray:
    c, mult, k, _ = weight.shape
    _check_kernel(k, stride)
    if mult != 1 or c != x.shape[1]:
        raise ValueError(f"depthwise weight {weight.shape} does not match {x.shape[1]} input channels")
    spec = ConvSpec(k, stride)
    n, _, h, w = x.shape
    ho, wo = spec.out_size(h), spec.out_size(w)
    xp = _pad(x, spec.pad)
    taps = weight[:, 0]
    y = np.zeros((n, c, ho, wo), dtype=np.result_type(x, weight))
    tmp = np.empty_like(y)
    for i in range(k):
        for j in range(k):
            np.multiply(_window(xp, i, j, stride, ho, wo), taps[:, i, j, None, None], out=tmp)
            y += tmp
    return check_finite(y, "depthwise")


def depthwise_bwd(dy: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1):
    c, _, k, _ = weight.shape
    p = (k - 1) // 2
    n, _, h, w = x.shape
    ho, wo = dy.shape[2:]
    xp = _pad(x, p)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    dweight = np.zeros_like(weight)
    taps = weight[:, 0]
    tmp = np.empty_like(dy)
    for i in range(k):
        for j in range(k):
            win = _window(xp, i, j, stride, ho, wo)
            np.multiply(dy, win, out=tmp)
            dweight[:, 0, i, j] = tmp.sum(axis=(0, 2, 3))
            np.multiply(dy, taps[:, i, j, None, None], out=tmp)
            _window(dxp, i, j, stride, ho, wo)[...] += tmp
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(dx), dweight


# -- pyramid depthwise ------------------------------------------------------

@dataclass(frozen=True)
class PyramidSpec:
    kernels: tuple = (3, 5, 7)
    fusion: str = "add"

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernels)
        if not ks:
            raise ValueError("pyramid needs at least one kernel")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"pyramid kernels must be strictly increasing, got {ks}")
        for k in ks:
            _check_kernel(k, 1)
        if self.fusion not in ("add", "concat"):
            raise ValueError(f"fusion must be 'add' or 'concat', got {self.fusion!r}")
        object.__setattr__(self, "kernels", ks)

    @property
    def branches(self) -> int:
        return len(self.kernels)

    def out_channels(self, channels: int) -> int:
        return channels * self.branches if self.fusion == "concat" else channels


def _check_branches(weights, pyr: PyramidSpec):
    if len(weights) != pyr.branches:
        raise ValueError(f"{len(weights)} branch weights for {pyr.branches} kernels")
    for w, k in zip(weights, pyr.kernels):
        if w.shape[2] != k:
            raise ValueError(f"branch weight {w.shape} does not match kernel {k}")


def pyramid_dw_fwd(x: np.ndarray, weights, pyr: PyramidSpec, stride: int = 1) -> np.ndarray:
    _check_branches(weights, pyr)
    outs = [depthwise_fwd(x, w, stride) for w in weights]
    if pyr.fusion == "concat":
        return channel_concat(outs)
    y = outs[0].copy()
    for o in outs[1:]:
        y += o
    return check_finite(y, "pyramid add")


def pyramid_dw_bwd(dy: np.ndarray, x: np.ndarray, weights, pyr: PyramidSpec, stride: int = 1):
    """Returns (dx, [dweight per branch])."""
    if pyr.fusion == "concat":
        branch_dy = channel_split(dy, [x.shape[1]] * pyr.branches)
    else:
        branch_dy = [dy] * pyr.branches
    dx = None
    dws = []
    for g, w in zip(branch_dy, weights):
        dxb, dw = depthwise_bwd(g, x, w, stride)
        dx = dxb if dx is None else dx + dxb
        dws.append(dw)
    return dx, dws


# -- batch normalization ----------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    std: np.ndarray
    training: bool = field(default=True)


def batchnorm_fwd(x: np.ndarray, state: BatchNormState):
    """Returns (y, cache).  Train mode updates the running statistics in place."""
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batch norm on an empty batch")
    if state.gamma.shape != (c,):
        raise ValueError(f"batch norm has {state.gamma.shape[0]} channels, input has {c}")
    if state.training:
        if n * h * w == 1:
            raise ValueError("batch norm in train mode needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    else:
        mean, var = state.running_mean, state.running_var
    std = np.sqrt(var + state.eps).astype(x.dtype)
    xhat = (x - mean[:, None, None]) / std[:, None, None]
    y = state.gamma[:, None, None] * xhat + state.beta[:, None, None]
    return check_finite(y, "batchnorm"), BatchNormCache(xhat, std, state.training)


def batchnorm_bwd(dy: np.ndarray, cache: BatchNormCache, gamma: np.ndarray):
    """Returns (dx, dgamma, dbeta)."""
    xhat, std = cache.xhat, cache.std
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    scale = (gamma / std)[:, None, None]
    if not cache.training:
        return dy * scale, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = scale * (dy - (dbeta / m)[:, None, None] - xhat * (dgamma / m)[:, None, None])
    return dx, dgamma, dbeta


# -- pointwise nonlinearity, pooling, classifier ----------------------------

def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_bwd(dy: np.ndarray, input_shape) -> np.ndarray:
    h, w = input_shape[2:]
    return np.broadcast_to(dy / (h * w), input_shape).copy()


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ValueError(f"fc expects {weight.shape[1]} inputs, got {flat.shape[1]}")
    return check_finite(flat @ weight.T + bias, "fully_connected")


def fully_connected_bwd(dy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns (dx shaped like x, dweight, dbias)."""
    flat = x.reshape(x.shape[0], -1)
    return (dy @ weight).reshape(x.shape), dy.T @ flat, dy.sum(axis=0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer labels and its gradient."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    target = np.zeros_like(logits)
    target[np.arange(n), labels] = 1
    return soft_cross_entropy(logits, target)


def soft_cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross entropy against per-row probability targets (used by mixup)."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-(target * logp).sum() / n)
    dlogits = (np.exp(logp) - target) / n
    return loss, dlogits.astype(logits.dtype)


# -- reference oracle --------------------------------------------------------

def naive_conv_reference(x: np.ndarray, weight: np.ndarray, stride: int = 1,
                         groups: int = 1) -> np.ndarray:
    """Plain-loop grouped cross-correlation with same padding; slow, for tests."""
    n, d_i, h, w = x.shape
    d_j, per_group, k, _ = weight.shape
    if d_i % groups or d_j % groups:
        raise ValueError(f"channels ({d_i}, {d_j}) not divisible by groups={groups}")
    if per_group != d_i // groups:
        raise ValueError(f"weight expects {per_group} channels per group, input gives {d_i // groups}")
    spec = ConvSpec(k, stride)
    pad = spec.pad
    ho, wo = spec.out_size(h), spec.out_size(w)
    out_per_group = d_j // groups
    y = np.zeros((n, d_j, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(d_j):
            g = o // out_per_group
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for ci in range(per_group):
                        c = g * per_group + ci
                        for i in range(k):
                            row = r * stride + i - pad
                            if row < 0 or row >= h:
                                continue
                            for j in range(k):
                                col = q * stride + j - pad
                                if 0 <= col < w:
                                    acc += float(x[b, c, row, col]) * float(weight[o, ci, i, j])
                    y[b, o, r, q] = acc
    return y.astype(np.result_type(x, weight))
