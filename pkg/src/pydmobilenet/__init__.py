"""Pyramid depthwise-separable residual networks on a small numpy engine."""
from .cost import analyze_network, cost_dwsep, cost_pyd_add, cost_pyd_concat, cost_std_conv
from .estimator import ChannelNormalizer, PydMobileNetClassifier
from .models import BlockKind, NetworkConfig, build_network, canonical_model_name, parse_model_name
from .train import TrainConfig, Trainer, lr_at, nag_step

__version__ = "0.1.0"

__all__ = [
    "BlockKind", "ChannelNormalizer", "NetworkConfig", "PydMobileNetClassifier", "TrainConfig",
    "Trainer", "analyze_network", "build_network", "canonical_model_name", "cost_dwsep",
    "cost_pyd_add", "cost_pyd_concat", "cost_std_conv", "lr_at", "nag_step", "parse_model_name",
]
