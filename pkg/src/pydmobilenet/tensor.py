"""NCHW tensor helpers on top of numpy arrays.

Tensors are plain contiguous ``numpy.ndarray`` objects of rank 4
(batch, channels, height, width).  Randomness comes from numpy's
``PCG64`` bit generator seeded through ``SeedSequence``, which is
bit-reproducible across platforms for a given numpy release.
"""
from __future__ import annotations

import math
import os

import numpy as np

DEFAULT_DTYPE = np.float32

_DEBUG = os.environ.get("PYDNET_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on layer outputs."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    if _DEBUG and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where or 'tensor'}")
    return x


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; ``stream`` keys split one seed into independent substreams."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def as_nchw(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 NCHW, got shape {x.shape}")
    return x


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def xavier_uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                        dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Glorot uniform draw on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out) for a weight of shape (out, in, k, k) or (out, in)."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(a + b, "elementwise_add")


def channel_concat(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ValueError("channel_concat needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"cannot concatenate {p.shape} with {ref}: n/h/w differ")
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=1)


def channel_split(x: np.ndarray, sizes) -> list[np.ndarray]:
    """Inverse of :func:`channel_concat`."""
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"sizes {sizes} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(x[:, start:start + s])
        start += s
    return out
