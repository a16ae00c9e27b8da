"""Federated semi-supervised segmentation with VAE-assisted consistency and ensemble distillation."""

from .config import ExperimentConfig, from_dict, parse_config
from .errors import ConfigError, ContractViolation, Fv2icError, NumericFault, ProtocolError
from .fedsim import run_experiment

__all__ = [
    "ConfigError",
    "ContractViolation",
    "ExperimentConfig",
    "Fv2icError",
    "NumericFault",
    "ProtocolError",
    "from_dict",
    "parse_config",
    "run_experiment",
]
