"""Regression quality metrics, uniform-averaged across targets."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import LearnError

__all__ = ["Metrics", "r2_score", "mean_squared_error", "mean_absolute_error",
           "compute_metrics"]


@dataclass(frozen=True)
class Metrics:
    r2: float
    mse: float
    mae: float

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise LearnError("mse and mae must be non-negative")
        if self.r2 > 1.0 + 1e-12:
            raise LearnError("r2 cannot exceed 1")


def _check_pair(y_true, y_pred):
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    if y_true.shape != y_pred.shape:
        raise LearnError(
            f"shape mismatch: targets {y_true.shape} vs predictions {y_pred.shape}")
    if y_true.size == 0:
        raise LearnError("empty target matrix")
    if not (np.isfinite(y_true).all() and np.isfinite(y_pred).all()):
        raise LearnError("metrics require finite values")
    return y_true, y_pred


def r2_score(y_true, y_pred) -> float:
    """Coefficient of determination averaged uniformly over targets.

    A target column with zero variance has no defined R²; such columns
    are excluded from the average with a warning.
    """
    y_true, y_pred = _check_pair(y_true, y_pred)
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    defined = ss_tot > 0
    if not defined.all():
        dead = np.nonzero(~defined)[0].tolist()
        warnings.warn(
            f"R² undefined for zero-variance target column(s) {dead}; excluded",
            stacklevel=2)
    if not defined.any():
        raise LearnError("R² undefined: every target column has zero variance")
    per_target = 1.0 - ss_res[defined] / ss_tot[defined]
    return float(per_target.mean())


def mean_squared_error(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(((y_true - y_pred) ** 2).mean())


def mean_absolute_error(y_true, y_pred) -> float:
    y_true, y_pred = _check_pair(y_true, y_pred)
    return float(np.abs(y_true - y_pred).mean())


def compute_metrics(y_true, y_pred) -> Metrics:
    return Metrics(
        r2=r2_score(y_true, y_pred),
        mse=mean_squared_error(y_true, y_pred),
        mae=mean_absolute_error(y_true, y_pred),
    )
