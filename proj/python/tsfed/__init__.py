"""Federated pretraining simulator for time series models."""

from ._tsfed import (
    Config,
    ConfigError,
    ContractError,
    DimensionError,
    TrainingResult,
    evaluate,
    scaling_sweep,
    train,
)

__all__ = [
    "Config",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "TrainingResult",
    "evaluate",
    "scaling_sweep",
    "train",
]
