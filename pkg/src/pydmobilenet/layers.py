"""Stateful layer wrappers: parameters, gradients and forward caches."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, conv_fans, make_rng, xavier_uniform_init


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


class Module:
    """Minimal container; children are discovered from attribute order."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}{i}", m

    def _own_params(self):
        return ()

    def _own_buffers(self):
        return ()

    def named_params(self, prefix: str = ""):
        for name, p in self._own_params():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._own_buffers():
            yield prefix + name, b
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, p in self.named_params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for _, child in self._children():
            child._cast_buffers(dtype)

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, d_i: int, d_j: int, k: int, stride: int = 1, rng=None, dtype=DEFAULT_DTYPE):
        shape = (d_j, d_i, k, k)
        self.stride = stride
        self.weight = Param(_init(shape, rng, dtype))
        self._x = None

    def _own_params(self):
        return (("weight", self.weight),)

    def forward(self, x):
        self._x = x
        return ops.conv2d_fwd(x, self.weight.value, self.stride)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        dx, self.weight.grad = ops.conv2d_bwd(dy, self._x, self.weight.value, self.stride)
        return dx


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, stride: int = 1, rng=None, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.weight = Param(_init((channels, 1, k, k), rng, dtype))
        self._x = None

    def _own_params(self):
        return (("weight", self.weight),)

    def forward(self, x):
        self._x = x
        return ops.depthwise_fwd(x, self.weight.value, self.stride)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        dx, self.weight.grad = ops.depthwise_bwd(dy, self._x, self.weight.value, self.stride)
        return dx


class PyramidDepthwise(Module):
    """Parallel depthwise branches (one per kernel size) fused by add or concat."""

    def __init__(self, channels: int, pyr: ops.PyramidSpec, stride: int = 1, rng=None,
                 dtype=DEFAULT_DTYPE):
        self.pyr = pyr
        self.stride = stride
        self.weights = [Param(_init((channels, 1, k, k), rng, dtype)) for k in pyr.kernels]
        self._x = None

    def _own_params(self):
        return tuple((f"weight_k{k}", p) for k, p in zip(self.pyr.kernels, self.weights))

    def forward(self, x):
        self._x = x
        return ops.pyramid_dw_fwd(x, [p.value for p in self.weights], self.pyr, self.stride)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        dx, dws = ops.pyramid_dw_bwd(dy, self._x, [p.value for p in self.weights],
                                     self.pyr, self.stride)
        for p, g in zip(self.weights, dws):
            p.grad = g
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.state = ops.BatchNormState.create(channels, dtype)
        self.gamma = Param(self.state.gamma)
        self.beta = Param(self.state.beta)
        self._cache = None

    def _own_params(self):
        return (("gamma", self.gamma), ("beta", self.beta))

    def _own_buffers(self):
        return (("running_mean", self.state.running_mean), ("running_var", self.state.running_var))

    def _cast_buffers(self, dtype):
        self.state.running_mean = self.state.running_mean.astype(dtype)
        self.state.running_var = self.state.running_var.astype(dtype)

    def forward(self, x):
        # params may have been replaced by the optimizer or a cast
        self.state.gamma = self.gamma.value
        self.state.beta = self.beta.value
        self.state.training = self.training
        y, self._cache = ops.batchnorm_fwd(x, self.state)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        dx, self.gamma.grad, self.beta.grad = ops.batchnorm_bwd(dy, self._cache, self.gamma.value)
        return dx


class ReLU(Module):
    # fixed activation pattern; set only by gradient checks
    mask = None

    def forward(self, x):
        self._x = x
        if self.mask is not None:
            return x * self.mask
        return ops.relu_fwd(x)

    def backward(self, dy):
        if self.mask is not None:
            return dy * self.mask
        return ops.relu_bwd(dy, self._x)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return ops.global_avg_pool(x)

    def backward(self, dy):
        return ops.global_avg_pool_bwd(dy, self._shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, dtype=DEFAULT_DTYPE):
        self.weight = Param(_init((d_out, d_in), rng, dtype))
        self.bias = Param(np.zeros(d_out, dtype=dtype))
        self._x = None

    def _own_params(self):
        return (("weight", self.weight), ("bias", self.bias))

    def forward(self, x):
        self._x = x
        return ops.fully_connected(x, self.weight.value, self.bias.value)

    def backward(self, dy):
        dx, self.weight.grad, self.bias.grad = ops.fully_connected_bwd(dy, self._x, self.weight.value)
        return dx


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def _children(self):
        for i, m in enumerate(self.layers):
            yield str(i), m

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def _init(shape, rng, dtype):
    if rng is None:
        rng = make_rng(0)
    fan_in, fan_out = conv_fans(shape)
    return xavier_uniform_init(shape, fan_in, fan_out, rng, dtype)
