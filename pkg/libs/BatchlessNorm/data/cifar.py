"""CIFAR-10 binary batches: one label byte then 3072 pixel bytes (R, G, B planes of 32 x 32)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union

import numpy as np

from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.utils.errors import IngestionError

IMAGE_SHAPE = (3, 32, 32)
PIXEL_BYTES = 3 * 32 * 32
RECORD_BYTES = 1 + PIXEL_BYTES
CIFAR_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


def read_cifar_batch(path: Union[str, Path], limit: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N x 3 x 32 x 32) and labels of one batch file, in file order."""
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as f:
            count = size // RECORD_BYTES if limit is None else min(limit, size // RECORD_BYTES)
            raw = f.read(count * RECORD_BYTES)
    except OSError as exc:
        raise IngestionError(path.name, 0, "cannot read file", exc) from exc

    if size % RECORD_BYTES:
        raise IngestionError(
            path.name, size - size % RECORD_BYTES, f"file size {size} is not a multiple of {RECORD_BYTES}"
        )
    if len(raw) != count * RECORD_BYTES:
        raise IngestionError(path.name, len(raw), "file ended early")

    records = np.frombuffer(raw, dtype=np.uint8).reshape(count, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise IngestionError(path.name, int(bad[0]) * RECORD_BYTES, f"label byte {labels[bad[0]]} out of range")
    return records[:, 1:].reshape((count,) + IMAGE_SHAPE), labels


def _to_dataset(images: np.ndarray, labels: np.ndarray, split: str, files: list[str]) -> Dataset:
    return Dataset(images.astype(np.float64) / 255.0, labels, split, CIFAR_CLASSES, {"files": files})


def load_cifar10(
    data_dir: Union[str, Path],
    limit: Optional[int] = None,
    val_limit: Optional[int] = None,
) -> tuple[Dataset, Dataset]:
    """Training batches 1-5 in order and the test batch as validation, pixels scaled to [0, 1].

    ``limit`` and ``val_limit`` keep only the first records in file order.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IngestionError(str(data_dir), 0, "data directory not found")

    images, labels, used = [], [], []
    remaining = limit
    for name in TRAIN_FILES:
        if remaining is not None and remaining <= 0:
            break
        batch_images, batch_labels = read_cifar_batch(data_dir / name, remaining)
        images.append(batch_images)
        labels.append(batch_labels)
        used.append(name)
        if remaining is not None:
            remaining -= len(batch_labels)

    val_images, val_labels = read_cifar_batch(data_dir / TEST_FILE, val_limit)
    train = _to_dataset(np.concatenate(images), np.concatenate(labels), "train", used)
    val = _to_dataset(val_images, val_labels, "val", [TEST_FILE])
    return train, val


def write_cifar_batch(path: Union[str, Path], dataset: Dataset) -> Path:
    """Serialize a loaded dataset back into the binary record layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.asarray(dataset.inputs) * 255.0).astype(np.uint8).reshape(len(dataset), PIXEL_BYTES)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    path.write_bytes(records.tobytes())
    return path
