"""Feature standardization fitted on training data only."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import LearnError

__all__ = ["ScalerParams", "fit_scaler", "apply_scaler", "invert_scaler"]


@dataclass(frozen=True)
class ScalerParams:
    """Per-column mean and standard deviation (ddof=1)."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        sd = np.asarray(self.sd, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != sd.shape:
            raise LearnError("scaler mean and sd must be matching 1-D arrays")
        if not (np.isfinite(mean).all() and np.isfinite(sd).all()):
            raise LearnError("scaler parameters must be finite")
        if (sd <= 0).any():
            raise LearnError("scaler sd must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    @property
    def n_columns(self) -> int:
        return len(self.mean)


def _check_matrix(X, n_columns=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise LearnError(f"expected a 2-D matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise LearnError("matrix contains non-finite values")
    if n_columns is not None and X.shape[1] != n_columns:
        raise LearnError(
            f"matrix has {X.shape[1]} columns, scaler was fit on {n_columns}")
    return X


def fit_scaler(X, column_names=None) -> ScalerParams:
    """Fit per-column standardization parameters.

    A zero-variance column cannot be standardized and is rejected with
    an error naming the offending column.
    """
    X = _check_matrix(X)
    if len(X) < 2:
        raise LearnError("need at least 2 rows to fit a scaler")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    dead = np.nonzero(sd <= 0)[0]
    if len(dead):
        col = int(dead[0])
        name = column_names[col] if column_names is not None else f"column {col}"
        raise LearnError(f"cannot standardize zero-variance {name}")
    return ScalerParams(mean=mean, sd=sd)


def apply_scaler(params: ScalerParams, X) -> np.ndarray:
    X = _check_matrix(X, params.n_columns)
    return (X - params.mean) / params.sd


def invert_scaler(params: ScalerParams, X_scaled) -> np.ndarray:
    X_scaled = _check_matrix(X_scaled, params.n_columns)
    return X_scaled * params.sd + params.mean
