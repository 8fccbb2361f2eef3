"""Desk-scale lab for Bayesian neural networks under white-box attack."""

__version__ = "0.1.0"

from .attacks import AttackConfig, EotConfig, run_attack
from .data import Dataset, SynthSpec, load_cifar10, synth_dataset
from .harness import ExperimentConfig, default_config, load_config
from .models import arch_spec, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import TrainConfig, evaluate, train

__all__ = [
    "AttackConfig",
    "Dataset",
    "EotConfig",
    "ExperimentConfig",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "arch_spec",
    "build_model",
    "default_config",
    "evaluate",
    "load_checkpoint",
    "load_cifar10",
    "load_config",
    "run_attack",
    "save_checkpoint",
    "synth_dataset",
    "train",
]
