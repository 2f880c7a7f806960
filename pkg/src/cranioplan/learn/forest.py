"""Bootstrap-aggregated regression trees with per-split feature subsets."""
from __future__ import annotations

import numpy as np

from .exceptions import LearnError
from .tree import TreeRegressor

__all__ = ["ForestRegressor"]


class ForestRegressor:
    """Random forest for a single target; prediction is the tree mean."""

    def __init__(self, n_estimators=100, max_depth=None, min_samples_split=2,
                 min_samples_leaf=1, max_features="sqrt"):
        if n_estimators < 1:
            raise LearnError("n_estimators must be at least 1")
        self.n_estimators = int(n_estimators)
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.trees = None

    def _tree(self):
        return TreeRegressor(
            max_depth=self.max_depth,
            min_samples_split=self.min_samples_split,
            min_samples_leaf=self.min_samples_leaf,
            max_features=self.max_features,
        )

    def fit(self, X, y, rng=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if rng is None:
            rng = np.random.default_rng(0)
        n = len(X)
        self.trees = []
        for _ in range(self.n_estimators):
            sample = rng.integers(0, n, size=n)
            tree = self._tree()
            tree.fit(X[sample], y[sample], rng=rng)
            self.trees.append(tree)
        return self

    def predict(self, X):
        if not self.trees:
            raise LearnError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def params(self):
        out = {"n_trees": np.array([len(self.trees)])}
        for i, tree in enumerate(self.trees):
            for key, arr in tree.params().items():
                out[f"tree{i}/{key}"] = arr
        return out

    @classmethod
    def from_params(cls, hyper, arrays):
        model = cls(**hyper)
        n_trees = int(arrays["n_trees"][0])
        model.trees = []
        for i in range(n_trees):
            sub = {key.split("/", 1)[1]: arr for key, arr in arrays.items()
                   if key.startswith(f"tree{i}/")}
            model.trees.append(TreeRegressor.from_params({}, sub))
        return model
