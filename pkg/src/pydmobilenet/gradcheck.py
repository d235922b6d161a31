"""Central finite-difference checks for every differentiable primitive.

Each ``check_*`` function builds a random float64 case from ``seed``, compares
the analytic backward against central differences with step ``STEP`` and returns
the largest elementwise relative error.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .layers import Module, ReLU
from .models import BlockConfig, NetworkConfig, build_block, build_network
from .tensor import make_rng

STEP = 1e-4
TOLERANCE = 1e-4
# below this magnitude errors are measured absolutely
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x: np.ndarray, coords=None, step: float = STEP) -> np.ndarray:
    """d f / d x at ``coords`` (flat indices, default all); ``x`` is perturbed in place and restored."""
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def _coords(size: int, rng, limit):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def _compare(f, tensors, grads, rng, limit=None) -> float:
    worst = 0.0
    for x, g in zip(tensors, grads):
        idx = _coords(x.size, rng, limit)
        worst = max(worst, rel_error(g.reshape(-1)[idx], numeric_grad(f, x, idx)))
    return worst


def _proj(rng, shape):
    return rng.standard_normal(shape)


def check_conv2d(seed: int, k: int | None = None, stride: int | None = None) -> float:
    rng = make_rng(seed, 101)
    k = k or int(rng.choice([1, 3]))
    stride = stride or int(rng.choice([1, 2]))
    n, d_i, d_j, h = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5), rng.integers(3, 8)
    x = rng.standard_normal((n, d_i, h, h))
    w = rng.standard_normal((d_j, d_i, k, k))
    r = _proj(rng, ops.conv2d_fwd(x, w, stride).shape)
    dx, dw = ops.conv2d_bwd(r, x, w, stride)
    return _compare(lambda: float((ops.conv2d_fwd(x, w, stride) * r).sum()), [x, w], [dx, dw], rng)


def check_pointwise(seed: int) -> float:
    return check_conv2d(seed, k=1, stride=1)


def check_depthwise(seed: int) -> float:
    rng = make_rng(seed, 102)
    k = int(rng.choice([3, 5, 7]))
    stride = int(rng.choice([1, 2]))
    n, c, h = rng.integers(1, 3), rng.integers(1, 5), rng.integers(4, 10)
    x = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((c, 1, k, k))
    r = _proj(rng, ops.depthwise_fwd(x, w, stride).shape)
    dx, dw = ops.depthwise_bwd(r, x, w, stride)
    return _compare(lambda: float((ops.depthwise_fwd(x, w, stride) * r).sum()), [x, w], [dx, dw], rng)


def check_pyramid(seed: int, fusion: str | None = None) -> float:
    rng = make_rng(seed, 103)
    fusion = fusion or str(rng.choice(["add", "concat"]))
    pyr = ops.PyramidSpec((3, 5, 7), fusion)
    stride = int(rng.choice([1, 2]))
    n, c, h = rng.integers(1, 3), rng.integers(1, 4), rng.integers(4, 9)
    x = rng.standard_normal((n, c, h, h))
    ws = [rng.standard_normal((c, 1, k, k)) for k in pyr.kernels]
    r = _proj(rng, ops.pyramid_dw_fwd(x, ws, pyr, stride).shape)
    dx, dws = ops.pyramid_dw_bwd(r, x, ws, pyr, stride)
    f = lambda: float((ops.pyramid_dw_fwd(x, ws, pyr, stride) * r).sum())  # noqa: E731
    return _compare(f, [x, *ws], [dx, *dws], rng)


def check_batchnorm(seed: int, training: bool = True) -> float:
    rng = make_rng(seed, 104)
    n, c, h = rng.integers(2, 4), rng.integers(1, 5), rng.integers(2, 6)
    x = rng.standard_normal((n, c, h, h)) * 2 + 0.5
    state = ops.BatchNormState.create(c, np.float64)
    state.gamma[...] = rng.uniform(0.5, 1.5, c)
    state.beta[...] = rng.standard_normal(c)
    state.running_mean[...] = rng.standard_normal(c)
    state.running_var[...] = rng.uniform(0.5, 2.0, c)
    state.training = training
    frozen = (state.running_mean.copy(), state.running_var.copy())

    def f():
        state.running_mean[...], state.running_var[...] = frozen
        y, _ = ops.batchnorm_fwd(x, state)
        return float((y * r).sum())

    y, cache = ops.batchnorm_fwd(x, state)
    r = _proj(rng, y.shape)
    dx, dg, db = ops.batchnorm_bwd(r, cache, state.gamma)
    return _compare(f, [x, state.gamma, state.beta], [dx, dg, db], rng)


def check_relu(seed: int) -> float:
    rng = make_rng(seed, 105)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 10 * STEP] += 0.1  # keep clear of the kink
    r = _proj(rng, x.shape)
    return _compare(lambda: float((ops.relu_fwd(x) * r).sum()), [x], [ops.relu_bwd(r, x)], rng)


def check_global_avg_pool(seed: int) -> float:
    rng = make_rng(seed, 106)
    x = rng.standard_normal((2, 3, int(rng.integers(1, 9)), int(rng.integers(1, 9))))
    r = _proj(rng, (2, 3, 1, 1))
    g = ops.global_avg_pool_bwd(r, x.shape)
    return _compare(lambda: float((ops.global_avg_pool(x) * r).sum()), [x], [g], rng)


def check_fully_connected(seed: int) -> float:
    rng = make_rng(seed, 107)
    n, d, c = rng.integers(1, 4), rng.integers(1, 9), rng.integers(2, 6)
    x = rng.standard_normal((n, d, 1, 1))
    w = rng.standard_normal((c, d))
    b = rng.standard_normal(c)
    r = _proj(rng, (n, c))
    dx, dw, db = ops.fully_connected_bwd(r, x, w)
    f = lambda: float((ops.fully_connected(x, w, b) * r).sum())  # noqa: E731
    return _compare(f, [x, w, b], [dx, dw, db], rng)


def check_softmax_cross_entropy(seed: int) -> float:
    rng = make_rng(seed, 108)
    n, c = rng.integers(1, 6), rng.integers(2, 11)
    logits = rng.standard_normal((n, c)) * 3
    labels = rng.integers(0, c, n)
    _, d = ops.softmax_cross_entropy(logits, labels)
    return _compare(lambda: ops.softmax_cross_entropy(logits, labels)[0], [logits], [d], rng)


def _module_check(model: Module, x: np.ndarray, loss_fn, rng, limit) -> float:
    """Check d loss / d (input and every parameter) for a module in train mode.

    BN running statistics are restored between evaluations so every call
    sees the same state.  ReLU on/off patterns are pinned to those of the
    unperturbed forward pass: a pre-activation within one step of zero would
    otherwise make the difference quotient straddle the kink.
    """
    model.train()
    buffers = [b for _, b in model.named_buffers()]
    saved = [b.copy() for b in buffers]
    relus = [m for m in model.modules() if isinstance(m, ReLU)]

    def f():
        for b, s in zip(buffers, saved):
            b[...] = s
        return loss_fn(model.forward(x))[0]

    _, dout = loss_fn(model.forward(x))
    dx = model.backward(dout)
    params = model.params()
    for m in relus:
        m.mask = (m._x > 0).astype(m._x.dtype)
    try:
        return _compare(f, [x] + [p.value for p in params], [dx] + [p.grad for p in params], rng, limit)
    finally:
        for m in relus:
            m.mask = None


def check_block(seed: int, kind: str = "pyd_concat", stride: int = 1, limit: int = 25) -> float:
    rng = make_rng(seed, 109)
    d_i = 4
    d_j = 4 if stride == 1 else 8
    block = build_block(BlockConfig(kind, d_i, d_j, 1.0, stride), rng).astype(np.float64)
    x = rng.standard_normal((2, d_i, 6, 6))
    r = rng.standard_normal((2, d_j, 6 // stride, 6 // stride))
    return _module_check(block, x, lambda y: (float((y * r).sum()), r), rng, limit)


def tiny_network_config(kind: str = "pyd_concat", alpha: float = 1.0, classes: int = 3) -> NetworkConfig:
    return NetworkConfig(kind, 1, alpha, classes, stage_channels=(4, 8, 16), image_size=8)


def check_tiny_network(seed: int, kind: str = "pyd_concat", limit: int = 12) -> float:
    rng = make_rng(seed, 110)
    cfg = tiny_network_config(kind)
    model = build_network(cfg, rng).astype(np.float64)
    x = rng.standard_normal((3, 3, 8, 8))
    labels = rng.integers(0, cfg.classes, 3)
    return _module_check(model, x, lambda z: ops.softmax_cross_entropy(z, labels), rng, limit)


OP_CHECKS = {
    "conv2d": check_conv2d,
    "pointwise": check_pointwise,
    "depthwise": check_depthwise,
    "pyramid_add": lambda s: check_pyramid(s, "add"),
    "pyramid_concat": lambda s: check_pyramid(s, "concat"),
    "batchnorm_train": lambda s: check_batchnorm(s, True),
    "batchnorm_eval": lambda s: check_batchnorm(s, False),
    "relu": check_relu,
    "global_avg_pool": check_global_avg_pool,
    "fully_connected": check_fully_connected,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "block_std_s2": lambda s: check_block(s, "std", 2),
    "block_dw_s1": lambda s: check_block(s, "dw", 1),
    "block_pyd_add_s2": lambda s: check_block(s, "pyd_add", 2),
    "block_pyd_concat_s1": lambda s: check_block(s, "pyd_concat", 1),
    "tiny_network": check_tiny_network,
}


def run_all(seeds=range(20), checks=None) -> dict[str, float]:
    """Worst relative error per check over ``seeds``."""
    checks = checks or OP_CHECKS
    return {name: max(fn(s) for s in seeds) for name, fn in checks.items()}
