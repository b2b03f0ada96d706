"""Datasets: spirals, CIFAR-10 binaries and batch sampling."""

from .cifar import load_cifar10, read_cifar_batch, write_cifar_batch
from .dataset import Dataset
from .sampler import Batch, BatchSampler, sample_batches
from .spirals import bounding_box, generate_spirals, spiral_curve, write_spirals_csv

__all__ = [
    "Batch",
    "BatchSampler",
    "Dataset",
    "bounding_box",
    "generate_spirals",
    "load_cifar10",
    "read_cifar_batch",
    "sample_batches",
    "spiral_curve",
    "write_cifar_batch",
    "write_spirals_csv",
]
