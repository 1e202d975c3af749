"""Compact neural decoder with task-specific distillation and integer-only deployment."""
from .errors import (ConfigError, ContractError, DegenerateInputError, DimensionError, FoldError,
                     FormatError, IntegrityError, NeuroDistillError, ParseError, TrainingError,
                     UndefinedMetricError)
from .model import DecoderConfig, backward, forward, init_params, param_count, predict

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateInputError", "DimensionError", "FoldError", "FormatError",
    "IntegrityError", "NeuroDistillError", "ParseError", "TrainingError", "UndefinedMetricError",
    "DecoderConfig", "backward", "forward", "init_params", "param_count", "predict",
]
