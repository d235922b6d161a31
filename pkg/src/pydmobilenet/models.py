"""Residual block variants and the Net-29 / Net-56 topologies."""
from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

import numpy as np

from . import layers as L
from .ops import PyramidSpec
from .tensor import DEFAULT_DTYPE, make_rng


class BlockKind(str, Enum):
    STD_CONV = "std"
    DW_CONV = "dw"
    PYD_ADD = "pyd_add"
    PYD_CONCAT = "pyd_concat"

    @property
    def family(self) -> str:
        return _FAMILY[self]

    @property
    def is_pyramid(self) -> bool:
        return self in (BlockKind.PYD_ADD, BlockKind.PYD_CONCAT)


_FAMILY = {
    BlockKind.STD_CONV: "ResNet",
    BlockKind.DW_CONV: "MobileNet",
    BlockKind.PYD_ADD: "PydMobileNet-Add",
    BlockKind.PYD_CONCAT: "PydMobileNet-Concat",
}

# width multipliers evaluated for each family
ALPHA_GRID = {
    BlockKind.STD_CONV: (0.5,),
    BlockKind.DW_CONV: (0.5, 1.0, 1.5),
    BlockKind.PYD_ADD: (0.25, 0.5, 0.75, 1.0),
    BlockKind.PYD_CONCAT: (0.25, 0.5, 0.75),
}
DEFAULT_KERNELS = (3, 5, 7)


def bottleneck_width(alpha, channels: int) -> int:
    """round(alpha * channels), halves rounded away from zero."""
    if alpha <= 0:
        raise ValueError(f"width multiplier must be positive, got {alpha}")
    width = int((Decimal(repr(float(alpha))) * channels).quantize(Decimal(1), ROUND_HALF_UP))
    if width < 1:
        raise ValueError(f"alpha={alpha} on {channels} channels rounds to zero width")
    return width


@dataclass(frozen=True)
class BlockConfig:
    kind: BlockKind
    d_i: int
    d_j: int
    alpha: float = 1.0
    stride: int = 1
    kernels: tuple = DEFAULT_KERNELS

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.d_i != self.d_j:
            raise ValueError(f"identity shortcut needs d_i == d_j, got {self.d_i} -> {self.d_j}")
        bottleneck_width(self.alpha, self.d_i)

    @property
    def width(self) -> int:
        return bottleneck_width(self.alpha, self.d_i)

    @property
    def pyramid(self) -> PyramidSpec | None:
        if self.kind == BlockKind.PYD_ADD:
            return PyramidSpec(self.kernels, "add")
        if self.kind == BlockKind.PYD_CONCAT:
            return PyramidSpec(self.kernels, "concat")
        return None

    @property
    def main_out_channels(self) -> int:
        pyr = self.pyramid
        return pyr.out_channels(self.width) if pyr else self.width


@dataclass(frozen=True)
class NetworkConfig:
    kind: BlockKind
    blocks_per_stage: int = 3
    alpha: float = 1.0
    classes: int = 10
    stage_channels: tuple = (32, 64, 128)
    kernels: tuple = DEFAULT_KERNELS
    image_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if self.blocks_per_stage < 1:
            raise ValueError("need at least one residual block per stage")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if len(self.stage_channels) != 3:
            raise ValueError("exactly three stages are supported")

    @property
    def depth(self) -> int:
        return nominal_depth(self)

    @property
    def name(self) -> str:
        return canonical_model_name(self.kind, self.depth, self.alpha)

    def block_configs(self):
        """Yield (stage, index, BlockConfig) in forward order."""
        d_prev = self.stage_channels[0]
        for s, d in enumerate(self.stage_channels):
            for b in range(self.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                yield s, b, BlockConfig(self.kind, d_prev, d, self.alpha, stride, self.kernels)
                d_prev = d

    @classmethod
    def from_name(cls, name: str, classes: int = 10, **kw) -> "NetworkConfig":
        kind, depth, alpha = parse_model_name(name)
        return cls(kind, blocks_from_depth(depth), alpha, classes, **kw)


def nominal_depth(cfg: NetworkConfig) -> int:
    """Stem + three weighted convs per block + classifier."""
    if cfg.blocks_per_stage < 1:
        raise ValueError("need at least one residual block per stage")
    return 1 + 3 * 3 * cfg.blocks_per_stage + 1


def blocks_from_depth(depth: int) -> int:
    if depth < 11 or (depth - 2) % 9:
        raise ValueError(f"depth {depth} is not of the form 2 + 9*blocks_per_stage")
    return (depth - 2) // 9


def _format_alpha(alpha) -> str:
    text = repr(float(alpha))
    return text[:-2] if text.endswith(".0") else text


def canonical_model_name(kind, depth: int, alpha) -> str:
    """e.g. ``PydMobileNet-Concat-56-0.75`` or ``MobileNet-29-1``."""
    kind = BlockKind(kind)
    blocks_from_depth(depth)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return f"{kind.family}-{depth}-{_format_alpha(alpha)}"


_NAME_RE = re.compile(r"^(ResNet|MobileNet|PydMobileNet-Add|PydMobileNet-Concat)-(\d+)-(\d+(?:\.\d+)?)$")


def parse_model_name(name: str):
    """Inverse of :func:`canonical_model_name`: returns (kind, depth, alpha)."""
    m = _NAME_RE.match(name.strip())
    if not m:
        raise ValueError(f"malformed model name {name!r}; expected e.g. 'PydMobileNet-Add-29-0.5'")
    family, depth, alpha = m.group(1), int(m.group(2)), float(m.group(3))
    kind = next(k for k, f in _FAMILY.items() if f == family)
    blocks_from_depth(depth)
    if alpha <= 0:
        raise ValueError(f"alpha must be positive in {name!r}")
    return kind, depth, alpha


def model_grid(depths=(29, 56)):
    """The 22 own-model configurations: every family x depth x alpha."""
    for depth in depths:
        for kind in BlockKind:
            for alpha in ALPHA_GRID[kind]:
                yield NetworkConfig(kind, blocks_from_depth(depth), alpha)


class ResidualBlock(L.Module):
    """Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-main(s), BN-ReLU-1x1, plus shortcut."""

    def __init__(self, cfg: BlockConfig, rng=None, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        b = cfg.width
        self.bn1 = L.BatchNorm2d(cfg.d_i, dtype)
        self.relu1 = L.ReLU()
        self.conv1 = L.Conv2d(cfg.d_i, b, 1, 1, rng, dtype)
        self.bn2 = L.BatchNorm2d(b, dtype)
        self.relu2 = L.ReLU()
        if cfg.kind == BlockKind.STD_CONV:
            self.main = L.Conv2d(b, b, 3, cfg.stride, rng, dtype)
        elif cfg.kind == BlockKind.DW_CONV:
            self.main = L.DepthwiseConv2d(b, 3, cfg.stride, rng, dtype)
        else:
            self.main = L.PyramidDepthwise(b, cfg.pyramid, cfg.stride, rng, dtype)
        self.bn3 = L.BatchNorm2d(cfg.main_out_channels, dtype)
        self.relu3 = L.ReLU()
        self.conv3 = L.Conv2d(cfg.main_out_channels, cfg.d_j, 1, 1, rng, dtype)
        if cfg.stride == 2:
            self.short_bn = L.BatchNorm2d(cfg.d_i, dtype)
            self.short_conv = L.Conv2d(cfg.d_i, cfg.d_j, 1, 2, rng, dtype)
        self._path = [self.bn1, self.relu1, self.conv1, self.bn2, self.relu2, self.main,
                      self.bn3, self.relu3, self.conv3]

    def _children(self):
        for name, m in super()._children():
            if not name.startswith("_path"):
                yield name, m

    def forward(self, x):
        y = x
        for layer in self._path:
            y = layer.forward(y)
        if self.cfg.stride == 2:
            short = self.short_conv.forward(self.short_bn.forward(x))
        else:
            short = x
        return y + short

    def backward(self, dy):
        g = dy
        for layer in reversed(self._path):
            g = layer.backward(g)
        if self.cfg.stride == 2:
            g = g + self.short_bn.backward(self.short_conv.backward(dy))
        else:
            g = g + dy
        return g


class Network(L.Module):
    def __init__(self, cfg: NetworkConfig, rng=None, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.stem = L.Conv2d(3, cfg.stage_channels[0], 3, 1, rng, dtype)
        stages = [[], [], []]
        for s, _, bcfg in cfg.block_configs():
            stages[s].append(ResidualBlock(bcfg, rng, dtype))
        self.stage1 = L.Sequential(*stages[0])
        self.stage2 = L.Sequential(*stages[1])
        self.stage3 = L.Sequential(*stages[2])
        self.bn = L.BatchNorm2d(cfg.stage_channels[2], dtype)
        self.relu = L.ReLU()
        self.pool = L.GlobalAvgPool()
        self.classifier = L.Linear(cfg.stage_channels[2], cfg.classes, rng, dtype)
        self._seq = [self.stem, self.stage1, self.stage2, self.stage3, self.bn, self.relu,
                     self.pool, self.classifier]

    def _children(self):
        for name, m in super()._children():
            if not name.startswith("_seq"):
                yield name, m

    @property
    def name(self) -> str:
        return self.cfg.name

    @property
    def blocks(self) -> list[ResidualBlock]:
        return self.stage1.layers + self.stage2.layers + self.stage3.layers

    def forward(self, x):
        for layer in self._seq:
            x = layer.forward(x)
        return x

    def backward(self, dlogits):
        g = dlogits
        for layer in reversed(self._seq):
            g = layer.backward(g)
        return g

    def stage_outputs(self, x):
        """Activation shapes after the stem and each stage (for shape checks)."""
        shapes = []
        x = self.stem.forward(x)
        shapes.append(x.shape)
        for stage in (self.stage1, self.stage2, self.stage3):
            x = stage.forward(x)
            shapes.append(x.shape)
        return shapes


def build_block(cfg: BlockConfig, rng=None, dtype=DEFAULT_DTYPE) -> ResidualBlock:
    return ResidualBlock(cfg, rng if rng is not None else make_rng(0), dtype)


def build_network(cfg: NetworkConfig, rng=None, dtype=DEFAULT_DTYPE) -> Network:
    return Network(cfg, rng if rng is not None else make_rng(0), dtype)


def count_params(model: L.Module) -> int:
    return int(sum(p.size for p in model.params()))


def as_array_dict(model: L.Module) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in model.named_params()}
