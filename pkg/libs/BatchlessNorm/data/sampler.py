"""Seeded mini-batch sampling: i.i.d. random subsets or per-epoch shuffles."""

from __future__ import annotations

from typing import Iterator, NamedTuple

import numpy as np

from BatchlessNorm.data.dataset import Dataset
from BatchlessNorm.utils.errors import ConfigError

SAMPLER_MODES = ("iid", "epoch")


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


class BatchSampler:
    """Draw batches of exactly ``batch_size`` instances.

    ``iid``: every batch is an independent uniform subset, without replacement
    inside the batch. ``epoch``: shuffle once per epoch and slice sequentially;
    a trailing partial slice is dropped.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed, mode: str = "iid") -> None:
        if mode not in SAMPLER_MODES:
            raise ConfigError(f"Unknown sampler mode '{mode}'.")
        if not 1 <= batch_size <= len(dataset):
            raise ConfigError(f"Batch size {batch_size} must lie in [1, {len(dataset)}].")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    @property
    def batches_per_epoch(self) -> int:
        return len(self.dataset) // self.batch_size

    def _take(self, indices: np.ndarray) -> Batch:
        return Batch(self.dataset.inputs[indices], self.dataset.labels[indices], indices)

    def next_batch(self) -> Batch:
        if self.mode == "iid":
            return self._take(self.rng.choice(len(self.dataset), size=self.batch_size, replace=False))
        if self._cursor + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.dataset))
            self._cursor = 0
        indices = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self._take(indices)

    def epoch(self) -> Iterator[Batch]:
        """One full pass in epoch mode."""
        self._cursor = len(self._order)
        for _ in range(self.batches_per_epoch):
            yield self.next_batch()

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.next_batch()


def sample_batches(sampler: BatchSampler, count: int) -> list[Batch]:
    return [sampler.next_batch() for _ in range(count)]
