"""Deterministic personalised federated learning simulator over a body/head MLP."""

from .errors import PflError
from .metrics import MetricsReport, confusion_matrix, macro_metrics
from .numerics import ModelParams, derive_rng, init_params
from .runtime import GlobalConfig, RoundRecord, StrategyConfig, run_experiment
from .strategies import STRATEGY_NAMES, make_strategy

__version__ = "0.1.0"

__all__ = [
    "PflError",
    "MetricsReport",
    "confusion_matrix",
    "macro_metrics",
    "ModelParams",
    "derive_rng",
    "init_params",
    "GlobalConfig",
    "RoundRecord",
    "StrategyConfig",
    "run_experiment",
    "STRATEGY_NAMES",
    "make_strategy",
]
