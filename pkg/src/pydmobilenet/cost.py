"""Closed-form parameter and multiply-accumulate counts.

Counts are Python ints.  Conventions used by :func:`analyze_network`:

* params include conv weights, BN gamma/beta and the classifier weight + bias
  (BN running statistics are buffers, not parameters);
* MACs count one per multiply-accumulate in convolutions and the classifier,
  one per element for BN (fused scale+shift), ReLU, residual additions, pyramid
  add-fusion and global pooling;
* FLOPs are either MACs or 2 x MACs, selected by ``flops_convention``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .models import BlockConfig, BlockKind, NetworkConfig, bottleneck_width
from .ops import ConvSpec

MACS = "macs"
TWO_MACS = "2macs"
PARAMS_NOTE = "conv weights + BN gamma/beta + classifier weight and bias; no conv bias"


def _positive(*dims):
    for d in dims:
        if int(d) != d or d < 1:
            raise ValueError(f"dimensions must be positive integers, got {dims}")


def cost_std_conv(h: int, w: int, d_i: int, d_j: int, k: int) -> int:
    _positive(h, w, d_i, d_j, k)
    return h * w * d_i * d_j * k * k


def cost_dwsep(h: int, w: int, d_i: int, d_j: int, k: int) -> int:
    _positive(h, w, d_i, d_j, k)
    return h * w * d_i * (k * k + d_j)


def cost_pyd_add(h: int, w: int, d_i: int, d_j: int, kernels) -> int:
    kernels = tuple(kernels)
    _positive(h, w, d_i, d_j, *kernels)
    m = len(kernels)
    return h * w * d_i * (m - 1 + sum(k * k for k in kernels) + d_j)


def cost_pyd_concat(h: int, w: int, d_i: int, d_j: int, kernels) -> int:
    kernels = tuple(kernels)
    _positive(h, w, d_i, d_j, *kernels)
    m = len(kernels)
    return h * w * d_i * (sum(k * k for k in kernels) + m * d_j)


def dwsep_ratio(k: int, d_j: int) -> Fraction:
    """Standard-conv cost over depthwise-separable cost, exact."""
    return Fraction(k * k * d_j, k * k + d_j)


def cost_with_alpha(cost_fn, alpha, h, w, d_i, d_j, k, scale_outputs: bool = False) -> int:
    """Evaluate ``cost_fn`` with width-scaled channels.

    Input channels always become round(alpha * d_i); output channels are scaled
    too when ``scale_outputs`` is set (the thin/thick standard-conv case).
    """
    d_i = bottleneck_width(alpha, d_i)
    if scale_outputs:
        d_j = bottleneck_width(alpha, d_j)
    return cost_fn(h, w, d_i, d_j, k)


@dataclass
class LayerCost:
    name: str
    out_shape: tuple
    params: int
    macs: int


@dataclass
class CostReport:
    model: str
    rows: list = field(default_factory=list)
    flops_convention: str = MACS
    params_note: str = PARAMS_NOTE

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return self.total_macs * (2 if self.flops_convention == TWO_MACS else 1)

    def with_convention(self, convention: str) -> "CostReport":
        if convention not in (MACS, TWO_MACS):
            raise ValueError(f"unknown FLOPs convention {convention!r}")
        return CostReport(self.model, self.rows, convention, self.params_note)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "out_shape", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.name, "x".join(map(str, r.out_shape)), r.params, r.macs])
        writer.writerow(["total", "", self.total_params, self.total_macs])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"model: {self.model}",
                 f"{'layer':<28}{'out_shape':>14}{'params':>12}{'macs':>14}"]
        for r in self.rows:
            shape = "x".join(map(str, r.out_shape))
            lines.append(f"{r.name:<28}{shape:>14}{r.params:>12,}{r.macs:>14,}")
        lines.append(f"{'total':<28}{'':>14}{self.total_params:>12,}{self.total_macs:>14,}")
        unit = "2 x MACs" if self.flops_convention == TWO_MACS else "MACs"
        lines.append(f"FLOPs ({unit}): {self.total_flops:,}")
        lines.append(f"params: {self.params_note}")
        return "\n".join(lines) + "\n"


class _Walker:
    def __init__(self):
        self.rows = []

    def add(self, name, shape, params, macs):
        self.rows.append(LayerCost(name, tuple(shape), int(params), int(macs)))

    def conv(self, name, h, w, d_i, d_j, k, stride):
        spec = ConvSpec(k, stride)
        ho, wo = spec.out_size(h), spec.out_size(w)
        self.add(name, (d_j, ho, wo), d_i * d_j * k * k, cost_std_conv(ho, wo, d_i, d_j, k))
        return ho, wo

    def depthwise(self, name, h, w, d, k, stride):
        spec = ConvSpec(k, stride)
        ho, wo = spec.out_size(h), spec.out_size(w)
        self.add(name, (d, ho, wo), d * k * k, ho * wo * d * k * k)
        return ho, wo

    def bn_relu(self, name, h, w, d):
        self.add(f"{name}.bn", (d, h, w), 2 * d, h * w * d)
        self.add(f"{name}.relu", (d, h, w), 0, h * w * d)


def _block_rows(walk: _Walker, prefix: str, cfg: BlockConfig, h: int, w: int):
    b = cfg.width
    walk.bn_relu(f"{prefix}.pre1", h, w, cfg.d_i)
    walk.conv(f"{prefix}.conv1", h, w, cfg.d_i, b, 1, 1)
    walk.bn_relu(f"{prefix}.pre2", h, w, b)
    if cfg.kind == BlockKind.STD_CONV:
        ho, wo = walk.conv(f"{prefix}.main", h, w, b, b, 3, cfg.stride)
    elif cfg.kind == BlockKind.DW_CONV:
        ho, wo = walk.depthwise(f"{prefix}.main", h, w, b, 3, cfg.stride)
    else:
        for k in cfg.kernels:
            ho, wo = walk.depthwise(f"{prefix}.main_k{k}", h, w, b, k, cfg.stride)
        if cfg.kind == BlockKind.PYD_ADD:
            walk.add(f"{prefix}.fuse_add", (b, ho, wo), 0, (len(cfg.kernels) - 1) * ho * wo * b)
        else:
            walk.add(f"{prefix}.fuse_concat", (cfg.main_out_channels, ho, wo), 0, 0)
    walk.bn_relu(f"{prefix}.pre3", ho, wo, cfg.main_out_channels)
    walk.conv(f"{prefix}.conv3", ho, wo, cfg.main_out_channels, cfg.d_j, 1, 1)
    if cfg.stride == 2:
        walk.add(f"{prefix}.short_bn", (cfg.d_i, h, w), 2 * cfg.d_i, h * w * cfg.d_i)
        walk.conv(f"{prefix}.short_conv", h, w, cfg.d_i, cfg.d_j, 1, 2)
    walk.add(f"{prefix}.residual_add", (cfg.d_j, ho, wo), 0, ho * wo * cfg.d_j)
    return ho, wo


def analyze_network(cfg: NetworkConfig, flops_convention: str = MACS) -> CostReport:
    walk = _Walker()
    h = w = cfg.image_size
    d0 = cfg.stage_channels[0]
    h, w = walk.conv("stem", h, w, 3, d0, 3, 1)
    for s, b, bcfg in cfg.block_configs():
        h, w = _block_rows(walk, f"stage{s + 1}.block{b}", bcfg, h, w)
    d = cfg.stage_channels[-1]
    walk.bn_relu("head", h, w, d)
    walk.add("pool", (d, 1, 1), 0, h * w * d)
    walk.add("classifier", (cfg.classes,), d * cfg.classes + cfg.classes, d * cfg.classes + cfg.classes)
    return CostReport(cfg.name, walk.rows).with_convention(flops_convention)


def count_params_enumerated(model) -> int:
    """Element count of every trainable tensor in an instantiated model."""
    if model is None:
        return 0
    return int(sum(p.value.size for _, p in model.named_params()))
