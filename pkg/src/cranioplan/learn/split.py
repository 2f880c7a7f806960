"""Seeded train/test partitioning and k-fold assignment."""
from __future__ import annotations

import numpy as np

from .dataset import Dataset
from .exceptions import LearnError

__all__ = ["split_indices", "split", "kfold_indices"]


def split_indices(n_rows: int, test_fraction: float, seed: int):
    """Shuffled disjoint (train, test) index arrays covering all rows."""
    if not (0.0 < test_fraction < 1.0):
        raise LearnError("test_fraction must be strictly between 0 and 1")
    n_test = int(round(n_rows * test_fraction))
    if n_test < 1 or n_rows - n_test < 1:
        raise LearnError(
            f"cannot split {n_rows} rows at fraction {test_fraction}")
    order = np.random.default_rng(seed).permutation(n_rows)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def split(dataset: Dataset, test_fraction: float, seed: int):
    train_idx, test_idx = split_indices(dataset.n_rows, test_fraction, seed)
    return dataset.take(train_idx), dataset.take(test_idx)


def kfold_indices(n_rows: int, k: int, seed: int):
    """List of (train, validation) index pairs for k disjoint folds.

    Fold sizes differ by at most one row; every row validates exactly
    once.
    """
    if k < 2:
        raise LearnError("k must be at least 2")
    if n_rows < k:
        raise LearnError(f"cannot make {k} folds from {n_rows} rows")
    order = np.random.default_rng(seed).permutation(n_rows)
    folds = np.array_split(order, k)
    pairs = []
    for i, fold in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != i])
        pairs.append((np.sort(rest), np.sort(fold)))
    return pairs
