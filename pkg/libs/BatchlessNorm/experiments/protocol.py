"""Convergence detection, output fluctuation and validation metrics."""

from __future__ import annotations

from collections import deque
from typing import Callable, Iterable, Optional

import numpy as np

from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.nn.network import Model
from BatchlessNorm.utils.errors import ConfigError, DimensionError

PROBABILITY_FLOOR = 1e-12


class ConvergenceDetector:
    """Converged once the rolling median of the last ``window`` losses has not set a new low for ``patience`` batches.

    Batches are counted from 1; the first median exists at batch ``window``.
    """

    def __init__(self, patience: int = 1000, window: int = 15) -> None:
        if window < 1 or patience < window:
            raise ConfigError(f"Need patience >= window >= 1, got patience={patience}, window={window}.")
        self.patience = patience
        self.window = window
        self.losses: deque[float] = deque(maxlen=window)
        self.batch = 0
        self.best_median = float("inf")
        self.best_batch: Optional[int] = None
        self.converged_at: Optional[int] = None

    @property
    def converged(self) -> bool:
        return self.converged_at is not None

    def update(self, loss: float) -> bool:
        self.batch += 1
        self.losses.append(float(loss))
        if len(self.losses) < self.window:
            return False
        median = float(np.median(self.losses))
        if median < self.best_median:
            self.best_median = median
            self.best_batch = self.batch
        if self.converged_at is None and self.batch - self.best_batch >= self.patience:
            self.converged_at = self.batch
        return self.converged


def detect_convergence(
    losses: Iterable[float],
    patience: int = 1000,
    window: int = 15,
    hard_cap: Optional[int] = None,
) -> Optional[int]:
    """Batch index at which ``losses`` converge, or None if the stream or the cap ends first.

    Args:
        losses: Per-batch training losses, consumed lazily.
        patience: Batches without a new low of the rolling median before stopping.
        window: Length of the rolling median.
        hard_cap: Give up after this many batches.

    Returns:
        The 1-based batch index of convergence, or None.

    Raises:
        ConfigError: If patience < window or window < 1.
    """
    detector = ConvergenceDetector(patience, window)
    for loss in losses:
        if detector.update(loss):
            return detector.converged_at
        if hard_cap is not None and detector.batch >= hard_cap:
            break
    return None


def fluctuation_score(snapshots: np.ndarray, floor: float = PROBABILITY_FLOOR) -> float:
    """Mean KL(P_t || P_mean) over snapshots t and sites, natural log.

    ``snapshots`` has shape (snapshots, sites, classes).
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 3 or snapshots.shape[0] == 0:
        raise DimensionError(f"Snapshots must be a non-empty T x S x C array, got {snapshots.shape}.")
    mean = snapshots.mean(axis=0, keepdims=True)
    log_ratio = np.log(np.maximum(snapshots, floor)) - np.log(np.maximum(mean, floor))
    kl = np.where(snapshots > 0.0, snapshots * log_ratio, 0.0).sum(axis=-1)
    return max(0.0, float(kl.mean()))


def fluctuation_grid(lower: np.ndarray, upper: np.ndarray, size: int = 8) -> np.ndarray:
    """``size`` x ``size`` regular grid of 2-d sites spanning the box [lower, upper]."""
    if size < 1:
        raise ConfigError(f"Grid size must be positive, got {size}.")
    xs = np.linspace(lower[0], upper[0], size)
    ys = np.linspace(lower[1], upper[1], size)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def measure_fluctuation(
    model: Model,
    sites: np.ndarray,
    n_batches: int,
    train_step: Callable[[], object],
) -> float:
    """Keep training for ``n_batches`` steps, snapshotting eval-phase outputs at ``sites`` after each.

    Args:
        model: Model that ``train_step`` updates in place.
        sites: Fixed inputs whose predicted probabilities are tracked.
        n_batches: Number of further training steps.
        train_step: Runs one optimizer step on the next batch.

    Returns:
        fluctuation_score of the stacked snapshots.
    """
    snapshots = []
    for _ in range(n_batches):
        train_step()
        snapshots.append(model.predict_proba(sites))
    return fluctuation_score(np.stack(snapshots))


def classification_metrics(probs: np.ndarray, labels: np.ndarray, floor: float = PROBABILITY_FLOOR):
    """Mean cross-entropy (probabilities floored) and top-1 accuracy."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise DimensionError(f"Probabilities {probs.shape} do not match {len(labels)} labels.")
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, floor))))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == labels))
    return loss, accuracy


def evaluate_validation(model: Model, dataset: Dataset, chunk: int = 1000) -> tuple[float, float]:
    """Eval-phase cross-entropy and accuracy; normalization NLL terms are not included."""
    return classification_metrics(model.predict_proba(dataset.inputs, chunk), dataset.labels)
