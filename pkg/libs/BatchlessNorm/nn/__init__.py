"""Normalization layers, networks, optimizers and checkpoints."""

from .checkpoint import Checkpoint, LayerRecord, load_checkpoint, save_checkpoint
from .network import LayerSpec, Model, build_cifar_cnn, build_spiral_mlp, dropout, forward, total_loss
from .normalization import (
    BatchNormState,
    NormLayerState,
    Phase,
    Sharing,
    SigmaMode,
    batchless_forward,
    batchnorm_forward,
    batchrenorm_forward,
    exact_nll,
    gauged_losses,
    param_from_sigma,
    sigma_from_param,
)
from .optimizers import OptimizerState, adam_step, amsgrad_step, apply_weight_decay, make_optimizer
from .statistics import (
    finalize_population_stats,
    init_from_sample,
    migrate_from_batchnorm,
    migrate_from_plain,
    sample_gauged_metrics,
)

__all__ = [
    "BatchNormState",
    "Checkpoint",
    "LayerRecord",
    "LayerSpec",
    "Model",
    "NormLayerState",
    "OptimizerState",
    "Phase",
    "Sharing",
    "SigmaMode",
    "adam_step",
    "amsgrad_step",
    "apply_weight_decay",
    "batchless_forward",
    "batchnorm_forward",
    "batchrenorm_forward",
    "build_cifar_cnn",
    "build_spiral_mlp",
    "dropout",
    "exact_nll",
    "finalize_population_stats",
    "forward",
    "gauged_losses",
    "init_from_sample",
    "load_checkpoint",
    "make_optimizer",
    "migrate_from_batchnorm",
    "migrate_from_plain",
    "param_from_sigma",
    "save_checkpoint",
    "sample_gauged_metrics",
    "sigma_from_param",
    "total_loss",
]
