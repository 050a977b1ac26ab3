"""mode-lab: mixtures of dyadic experts and their low-rank relatives."""

from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

from mode_lab.adapters import (
    Adapter,
    LoraAdapter,
    ModeAdapter,
    MoLoraAdapter,
    MoLoraSDAdapter,
    apply_adapter,
    dyadic_reconstruct,
    enumerate_compositions,
    init_adapter,
    load_checkpoint,
    param_count,
    route,
    save_checkpoint,
)
from mode_lab.config import (
    AdapterConfig,
    AdapterSpec,
    ExperimentConfig,
    SynthSpec,
    TrainConfig,
)
from mode_lab.exceptions import (
    CompositionOverflowError,
    ConfigError,
    ContractError,
    InfeasibleError,
    ModeLabError,
    NumericError,
    ShapeError,
)
from mode_lab.synthbench import SyntheticTaskSet, gen_multitask
from mode_lab.training import RunReport, train_loop

try:
    __version__ = version("mode-lab")
except PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = [
    "Adapter",
    "AdapterConfig",
    "AdapterSpec",
    "CompositionOverflowError",
    "ConfigError",
    "ContractError",
    "ExperimentConfig",
    "InfeasibleError",
    "LoraAdapter",
    "MoLoraAdapter",
    "MoLoraSDAdapter",
    "ModeAdapter",
    "ModeLabError",
    "NumericError",
    "RunReport",
    "ShapeError",
    "SynthSpec",
    "SyntheticTaskSet",
    "TrainConfig",
    "apply_adapter",
    "dyadic_reconstruct",
    "enumerate_compositions",
    "gen_multitask",
    "init_adapter",
    "load_checkpoint",
    "param_count",
    "route",
    "save_checkpoint",
    "train_loop",
]
