"""Ordinary least squares baseline."""
from __future__ import annotations

import numpy as np

from .exceptions import LearnError

__all__ = ["LinearRegressor"]


class LinearRegressor:
    """Single-target linear model fit by closed-form least squares."""

    def __init__(self):
        self.coef = None
        self.intercept = 0.0

    def fit(self, X, y, rng=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        design = np.column_stack([X, np.ones(len(X))])
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
        self.coef = beta[:-1]
        self.intercept = float(beta[-1])
        return self

    def predict(self, X):
        if self.coef is None:
            raise LearnError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        return X @ self.coef + self.intercept

    def params(self):
        return {"coef": self.coef,
                "intercept": np.array([self.intercept])}

    @classmethod
    def from_params(cls, hyper, arrays):
        model = cls()
        model.coef = np.asarray(arrays["coef"], dtype=np.float64)
        model.intercept = float(arrays["intercept"][0])
        return model
