"""Gradient and data poisoning against robust aggregation, on a small numpy autodiff."""

from .aggregators import AggregatorSpec, aggregate, selection_rate
from .attacks import AttackSpec, AuxiliaryStats, craft_ga, craft_lie, craft_og
from .harness import ConfigError, ExperimentConfig, load_config, parse_config, run_experiment
from .inversion import FeasibleSet, InversionConfig, invert, project
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "aggregate", "selection_rate",
    "AttackSpec", "AuxiliaryStats", "craft_ga", "craft_lie", "craft_og",
    "ConfigError", "ExperimentConfig", "load_config", "parse_config", "run_experiment",
    "FeasibleSet", "InversionConfig", "invert", "project",
    "BACKEND",
]
