"""
BatchlessNorm: normalization layers that learn their statistics instead of taking them from the batch.

Simple usage:
    from BatchlessNorm import build_spiral_mlp, generate_spirals
    model = build_spiral_mlp("binlog", seed=0)
    train, val = generate_spirals(seed=0)

Command line:
    python run.py spiral --norm binlog --batch-size 4 --runs 2
"""

from BatchlessNorm.cli.application import BatchlessNorm, main
from BatchlessNorm.data import BatchSampler, Dataset, generate_spirals, load_cifar10
from BatchlessNorm.experiments import Trainer, run_cifar_suite, run_spiral_suite
from BatchlessNorm.nn import (
    Model,
    SigmaMode,
    build_cifar_cnn,
    build_spiral_mlp,
    init_from_sample,
    load_checkpoint,
    make_optimizer,
    migrate_from_batchnorm,
    migrate_from_plain,
    save_checkpoint,
)
from BatchlessNorm.utils.logger import LoggerWrapper, NoOpLogger

__all__ = [
    "BatchSampler",
    "BatchlessNorm",
    "Dataset",
    "LoggerWrapper",
    "Model",
    "NoOpLogger",
    "SigmaMode",
    "Trainer",
    "build_cifar_cnn",
    "build_spiral_mlp",
    "generate_spirals",
    "init_from_sample",
    "load_checkpoint",
    "load_cifar10",
    "main",
    "make_optimizer",
    "migrate_from_batchnorm",
    "migrate_from_plain",
    "run_cifar_suite",
    "run_spiral_suite",
    "save_checkpoint",
]
__version__ = "0.1.0"
