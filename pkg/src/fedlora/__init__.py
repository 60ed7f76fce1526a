"""Federated LoRA fine-tuning with personal A / shared B adapters on a frozen toy base."""

from fedlora.adapters import LoraAdapter, StrategyKind, init_adapter
from fedlora.config import ExperimentConfig, parse_config
from fedlora.federation import AggregatorKind, run_experiment
from fedlora.linalg import RngStream, gaussian_matrix, matmul

__all__ = [
    "AggregatorKind",
    "ExperimentConfig",
    "LoraAdapter",
    "RngStream",
    "StrategyKind",
    "gaussian_matrix",
    "init_adapter",
    "matmul",
    "parse_config",
    "run_experiment",
]

__version__ = "0.1.0"
