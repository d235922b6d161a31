"""Built-in correctness checks run by ``pydnet selftest``."""
from __future__ import annotations

import numpy as np

from . import gradcheck, ops
from .cost import analyze_network, count_params_enumerated
from .models import build_network, model_grid
from .tensor import make_rng


def scaled_error(actual, reference, magnitude=None) -> float:
    """max |a - r| / max(1, m), where m bounds the summed |terms| behind each output.

    Without ``magnitude`` the reference itself is used.  Float32 sums can only be
    accurate relative to the magnitude of their terms, not of a cancelled result.
    """
    reference = np.asarray(reference, dtype=np.float64)
    scale = np.abs(reference) if magnitude is None else np.asarray(magnitude, dtype=np.float64)
    diff = np.abs(np.asarray(actual, dtype=np.float64) - reference)
    return float(np.max(diff / np.maximum(1.0, scale))) if diff.size else 0.0


def decomposition_error(seed: int) -> float:
    """depthwise+pointwise vs grouped naive conv followed by naive 1x1, float32."""
    rng = make_rng(seed, 201)
    n, c, d_j, h = (int(v) for v in (rng.integers(1, 3), rng.integers(1, 5),
                                     rng.integers(1, 5), rng.integers(3, 8)))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    dw = rng.standard_normal((c, 1, k, k)).astype(np.float32)
    pw = rng.standard_normal((d_j, c, 1, 1)).astype(np.float32)
    fast = ops.pointwise_fwd(ops.depthwise_fwd(x, dw, stride), pw)
    slow = ops.naive_conv_reference(ops.naive_conv_reference(x, dw, stride, groups=c), pw)
    x64, dw64, pw64 = (np.abs(a).astype(np.float64) for a in (x, dw, pw))
    magnitude = ops.pointwise_fwd(ops.depthwise_fwd(x64, dw64, stride), pw64)
    return scaled_error(fast, slow, magnitude)


def pyramid_reduction_error(seed: int) -> float:
    rng = make_rng(seed, 202)
    x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    stride = int(rng.choice([1, 2]))
    ref = ops.depthwise_fwd(x, w, stride)
    return max(float(np.max(np.abs(ops.pyramid_dw_fwd(x, [w], ops.PyramidSpec((3,), f), stride) - ref)))
               for f in ("add", "concat"))


def concat_add_bridge_error(seed: int) -> float:
    """pointwise over Concat with a replicated weight equals pointwise(W) over Add."""
    rng = make_rng(seed, 203)
    c, d_j = 3, 4
    x = rng.standard_normal((2, c, 8, 8)).astype(np.float32)
    ws = [rng.standard_normal((c, 1, k, k)).astype(np.float32) for k in (3, 5, 7)]
    pw = rng.standard_normal((d_j, c, 1, 1)).astype(np.float32)
    add = ops.pyramid_dw_fwd(x, ws, ops.PyramidSpec((3, 5, 7), "add"))
    cat = ops.pyramid_dw_fwd(x, ws, ops.PyramidSpec((3, 5, 7), "concat"))
    lhs = ops.pointwise_fwd(cat, np.concatenate([pw] * 3, axis=1))
    ref = ops.pointwise_fwd(add, pw)
    absx = np.abs(x).astype(np.float64)
    mag_add = ops.pyramid_dw_fwd(absx, [np.abs(w).astype(np.float64) for w in ws],
                                 ops.PyramidSpec((3, 5, 7), "add"))
    magnitude = ops.pointwise_fwd(mag_add, np.abs(pw).astype(np.float64))
    return scaled_error(lhs, ref, magnitude)


def cost_oracle_mismatches() -> list[str]:
    bad = []
    for cfg in model_grid():
        if analyze_network(cfg).total_params != count_params_enumerated(build_network(cfg)):
            bad.append(cfg.name)
    return bad


def run_selftest(seeds: int = 5, out=print) -> bool:
    ok = True

    def report(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        out(f"{'PASS' if passed else 'FAIL'}  {name:<28} {detail}")

    for name, fn in gradcheck.OP_CHECKS.items():
        err = max(fn(s) for s in range(seeds))
        report(f"grad:{name}", err < gradcheck.TOLERANCE, f"max rel err {err:.2e}")
    err = max(decomposition_error(s) for s in range(20))
    report("depthwise+pointwise oracle", err <= 1e-6, f"max scaled err {err:.2e}")
    err = max(pyramid_reduction_error(s) for s in range(10))
    report("pyramid K={3} reduction", err == 0.0, f"max abs err {err:.2e}")
    err = max(concat_add_bridge_error(s) for s in range(10))
    report("concat/add bridge", err <= 1e-5, f"max scaled err {err:.2e}")
    bad = cost_oracle_mismatches()
    report("cost model oracle", not bad, "22 configs" if not bad else f"mismatch: {bad}")
    return ok
