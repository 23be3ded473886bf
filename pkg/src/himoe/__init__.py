"""Hierarchical mixture-of-experts routing laboratory (numpy)."""
from .config import ConfigError, LabConfig, default_config, load_config, parse_config
from .harness import (RunRecord, SyntheticDatasetSpec, TrainConfig, compare_baselines,
                      generate_synthetic, pareto_sweep, train)
from .moe import MoEParams, init_params, load_checkpoint, moe_backward, moe_forward, save_checkpoint
from .router import (VARIANTS, EmaState, GroupPartition, RouterConfig, RoutingOutput,
                     flat_topk, grouped_topk, route)
from .theory import PropertyReport, run_all

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "LabConfig", "default_config", "load_config", "parse_config",
    "RunRecord", "SyntheticDatasetSpec", "TrainConfig", "compare_baselines",
    "generate_synthetic", "pareto_sweep", "train",
    "MoEParams", "init_params", "load_checkpoint", "moe_backward", "moe_forward", "save_checkpoint",
    "VARIANTS", "EmaState", "GroupPartition", "RouterConfig", "RoutingOutput",
    "flat_topk", "grouped_topk", "route",
    "PropertyReport", "run_all",
]
