"""Three intertwined, noisy spirals in the plane."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Union

import numpy as np

from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.utils.errors import ConfigError

SPIRAL_CLASSES = 3


def spiral_curve(t: np.ndarray, k: int, turns: float = 1.75, r_max: float = 1.0) -> np.ndarray:
    """Noiseless point of arm ``k`` at curve parameter ``t`` in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    radius = r_max * t
    angle = turns * 2.0 * np.pi * t + 2.0 * np.pi * k / SPIRAL_CLASSES
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def _generate_split(rng: np.random.Generator, n_per_class: int, split: str, params: dict) -> Dataset:
    inputs, labels, ts = [], [], []
    for k in range(SPIRAL_CLASSES):
        t = rng.uniform(0.0, 1.0, n_per_class)
        # Diffusion grows with the radius.
        jitter = rng.normal(0.0, 1.0, (n_per_class, 2)) * (params["noise"] * t)[:, None]
        inputs.append(spiral_curve(t, k, params["turns"], params["r_max"]) + jitter)
        labels.append(np.full(n_per_class, k, dtype=np.int64))
        ts.append(t)
    return Dataset(
        np.concatenate(inputs),
        np.concatenate(labels),
        split,
        SPIRAL_CLASSES,
        {**params, "t": np.concatenate(ts), "n_per_class": n_per_class},
    )


def generate_spirals(
    n_train_per_class: int = 20000,
    n_val_per_class: int = 4000,
    seed: int = 0,
    *,
    turns: float = 1.75,
    noise: float = 0.12,
    r_max: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Train and validation spirals, both drawn from one generator seeded with ``seed``."""
    if n_train_per_class <= 0 or n_val_per_class <= 0:
        raise ConfigError("Spiral class counts must be positive.")
    if noise < 0 or r_max <= 0:
        raise ConfigError("Spiral noise must be non-negative and r_max positive.")
    params = {"seed": int(seed), "turns": float(turns), "noise": float(noise), "r_max": float(r_max)}
    rng = np.random.default_rng(seed)
    train = _generate_split(rng, n_train_per_class, "train", params)
    val = _generate_split(rng, n_val_per_class, "val", params)
    return train, val


def bounding_box(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return dataset.inputs.min(axis=0), dataset.inputs.max(axis=0)


def write_spirals_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write ``x,y,label`` rows after ``#`` lines carrying the generation parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key in ("seed", "turns", "noise", "r_max", "n_per_class"):
            if key in dataset.metadata:
                f.write(f"# {key}: {dataset.metadata[key]}\n")
        f.write(f"# split: {dataset.split}\n")
        writer = csv.writer(f)
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(dataset.inputs, dataset.labels):
            writer.writerow([repr(float(x)), repr(float(y)), int(label)])
    return path
