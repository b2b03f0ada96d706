"""Experiment protocol, training loop, suites and result files."""

from .protocol import (
    ConvergenceDetector,
    classification_metrics,
    detect_convergence,
    evaluate_validation,
    fluctuation_grid,
    fluctuation_score,
    measure_fluctuation,
)
from .suites import RunConfig, RunResult, SuiteResult, run_cifar_suite, run_spiral_suite
from .trainer import Trainer, accumulate_gradients, batch_gradients

__all__ = [
    "ConvergenceDetector",
    "RunConfig",
    "RunResult",
    "SuiteResult",
    "Trainer",
    "accumulate_gradients",
    "batch_gradients",
    "classification_metrics",
    "detect_convergence",
    "evaluate_validation",
    "fluctuation_grid",
    "fluctuation_score",
    "measure_fluctuation",
    "run_cifar_suite",
    "run_spiral_suite",
]
