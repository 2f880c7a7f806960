"""Gradient-boosted regression trees on a choice of losses.

Each stage fits a small tree to the negative gradient of the loss at
the current prediction, then replaces every leaf value with the
loss-specific line-search optimum over that leaf's training rows.
"""
from __future__ import annotations

import numpy as np

from .exceptions import LearnError
from .tree import TreeRegressor

__all__ = ["GradientBoostingRegressor"]

_LOSSES = ("squared_error", "absolute_error", "huber", "quantile")


class GradientBoostingRegressor:
    """Additive tree model for a single target."""

    def __init__(self, n_estimators=100, learning_rate=0.1,
                 loss="squared_error", criterion="friedman_mse",
                 max_depth=3, min_samples_split=2, min_samples_leaf=1,
                 alpha=0.9):
        if n_estimators < 1:
            raise LearnError("n_estimators must be at least 1")
        if not (0.0 < learning_rate <= 1.0):
            raise LearnError("learning_rate must be in (0, 1]")
        if loss not in _LOSSES:
            raise LearnError(f"loss must be one of {_LOSSES}")
        if not (0.0 < alpha < 1.0):
            raise LearnError("alpha must be in (0, 1)")
        self.n_estimators = int(n_estimators)
        self.learning_rate = float(learning_rate)
        self.loss = loss
        self.criterion = criterion
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.min_samples_leaf = min_samples_leaf
        self.alpha = float(alpha)
        self.init_value = 0.0
        self.trees = None

    # -- loss pieces ------------------------------------------------------

    def _initial(self, y):
        if self.loss == "squared_error":
            return float(y.mean())
        if self.loss == "quantile":
            return float(np.quantile(y, self.alpha))
        return float(np.median(y))

    def _negative_gradient(self, y, f):
        diff = y - f
        if self.loss == "squared_error":
            return diff, None
        if self.loss == "absolute_error":
            return np.sign(diff), None
        if self.loss == "huber":
            delta = float(np.quantile(np.abs(diff), self.alpha))
            if delta <= 0:
                delta = np.abs(diff).max() + 1e-12
            return np.clip(diff, -delta, delta), delta
        return np.where(diff > 0, self.alpha, self.alpha - 1.0), None

    def _leaf_update(self, diff, delta):
        """Optimal constant for one leaf given residuals y - f."""
        if self.loss == "squared_error":
            return float(diff.mean())
        if self.loss == "absolute_error":
            return float(np.median(diff))
        if self.loss == "quantile":
            return float(np.quantile(diff, self.alpha))
        med = float(np.median(diff))
        centered = diff - med
        return med + float(np.mean(
            np.sign(centered) * np.minimum(np.abs(centered), delta)))

    # -- fit / predict ----------------------------------------------------

    def fit(self, X, y, rng=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.init_value = self._initial(y)
        f = np.full(len(y), self.init_value)
        self.trees = []
        for _ in range(self.n_estimators):
            residual, delta = self._negative_gradient(y, f)
            tree = TreeRegressor(
                max_depth=self.max_depth,
                min_samples_split=self.min_samples_split,
                min_samples_leaf=self.min_samples_leaf,
                criterion=self.criterion,
            ).fit(X, residual, rng=rng)

            leaf_of = tree.apply(X)
            diff = y - f
            for leaf in np.unique(leaf_of):
                rows = leaf_of == leaf
                tree.set_leaf_values([leaf], [self._leaf_update(diff[rows], delta)])
            f += self.learning_rate * tree.value[leaf_of]
            self.trees.append(tree)
        return self

    def predict(self, X):
        if self.trees is None:
            raise LearnError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.init_value)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(X)
        return out

    def params(self):
        out = {"n_trees": np.array([len(self.trees)]),
               "init_value": np.array([self.init_value]),
               "learning_rate": np.array([self.learning_rate])}
        for i, tree in enumerate(self.trees):
            for key, arr in tree.params().items():
                out[f"tree{i}/{key}"] = arr
        return out

    @classmethod
    def from_params(cls, hyper, arrays):
        model = cls(**hyper)
        model.init_value = float(arrays["init_value"][0])
        model.learning_rate = float(arrays["learning_rate"][0])
        n_trees = int(arrays["n_trees"][0])
        model.trees = []
        for i in range(n_trees):
            sub = {key.split("/", 1)[1]: arr for key, arr in arrays.items()
                   if key.startswith(f"tree{i}/")}
            model.trees.append(TreeRegressor.from_params({}, sub))
        return model
