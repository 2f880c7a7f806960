"""Training dataset container and its CSV form.

Column order on disk is fixed: age_days, A, AP, LAT, front_k, front_L0,
back_k, back_L0, then the input mode coefficients b_in_1..k_in, then
the target mode coefficients b_out_1..k_out.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import LearnError

__all__ = ["BASE_FEATURES", "Dataset", "feature_names", "target_names",
           "write_dataset_csv", "read_dataset_csv"]

BASE_FEATURES = ("age_days", "A", "AP", "LAT",
                 "front_k", "front_L0", "back_k", "back_L0")


def feature_names(k_in: int) -> tuple:
    return BASE_FEATURES + tuple(f"b_in_{i}" for i in range(1, k_in + 1))


def target_names(k_out: int) -> tuple:
    return tuple(f"b_out_{i}" for i in range(1, k_out + 1))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, target matrix, and their column names.

    Features are the 8 scalar descriptors plus the input shape modes;
    targets are the output shape modes. No missing values are allowed.
    """

    X: np.ndarray
    Y: np.ndarray
    feature_names: tuple
    target_names: tuple
    row_ids: tuple = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2:
            raise LearnError("X and Y must be 2-D")
        if len(X) != len(Y):
            raise LearnError(f"row count mismatch: X has {len(X)}, Y has {len(Y)}")
        if not (np.isfinite(X).all() and np.isfinite(Y).all()):
            raise LearnError("dataset contains missing or non-finite values")
        names_x = tuple(self.feature_names)
        names_y = tuple(self.target_names)
        if len(names_x) != X.shape[1]:
            raise LearnError(
                f"{len(names_x)} feature names for {X.shape[1]} columns")
        if len(names_y) != Y.shape[1]:
            raise LearnError(
                f"{len(names_y)} target names for {Y.shape[1]} columns")
        ids = self.row_ids
        if ids is not None:
            ids = tuple(str(r) for r in ids)
            if len(ids) != len(X):
                raise LearnError("row_ids length does not match row count")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "feature_names", names_x)
        object.__setattr__(self, "target_names", names_y)
        object.__setattr__(self, "row_ids", ids)

    @property
    def n_rows(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_targets(self) -> int:
        return self.Y.shape[1]

    @property
    def column_names(self) -> tuple:
        return self.feature_names + self.target_names

    def take(self, indices) -> "Dataset":
        """Row subset in the given order."""
        indices = np.asarray(indices, dtype=np.intp)
        ids = None
        if self.row_ids is not None:
            ids = tuple(self.row_ids[i] for i in indices)
        return Dataset(self.X[indices], self.Y[indices],
                       self.feature_names, self.target_names, ids)


def write_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.column_names)
        for x, y in zip(dataset.X, dataset.Y):
            writer.writerow([repr(float(v)) for v in x]
                            + [repr(float(v)) for v in y])


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LearnError(f"{path}: empty dataset file") from None
        rows = [row for row in reader if row]

    n_in = sum(1 for name in header if name.startswith("b_in_"))
    n_out = sum(1 for name in header if name.startswith("b_out_"))
    expected = list(feature_names(n_in) + target_names(n_out))
    if header != expected:
        raise LearnError(
            f"{path}: unexpected column layout {header[:10]}...")
    if not rows:
        raise LearnError(f"{path}: dataset has a header but no rows")
    if any(len(row) != len(header) for row in rows):
        raise LearnError(f"{path}: ragged rows")
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise LearnError(f"{path}: non-numeric cell ({exc})") from None
    n_x = len(BASE_FEATURES) + n_in
    return Dataset(data[:, :n_x], data[:, n_x:],
                   tuple(header[:n_x]), tuple(header[n_x:]))
