"""Regression tree with exact greedy splits.

The builder works level by level: for every tree depth it sorts all
still-active samples once per feature, keyed by (node, value), and
scans every node's candidate thresholds in a handful of vectorized
segment operations. That keeps deep trees on a few thousand rows in
the tens of milliseconds, which the forest and boosting models rely
on.
"""
from __future__ import annotations

import numpy as np

from .exceptions import LearnError

__all__ = ["TreeRegressor"]

_CRITERIA = ("squared_error", "friedman_mse")


def _resolve_max_features(max_features, d: int) -> int:
    if max_features is None:
        return d
    if max_features == "sqrt":
        return max(1, int(np.sqrt(d)))
    if max_features == "log2":
        return max(1, int(np.log2(d)))
    if isinstance(max_features, float):
        if not (0.0 < max_features <= 1.0):
            raise LearnError("fractional max_features must be in (0, 1]")
        return max(1, int(round(max_features * d)))
    if isinstance(max_features, (int, np.integer)):
        if not (1 <= max_features <= d):
            raise LearnError(f"max_features must be in [1, {d}]")
        return int(max_features)
    raise LearnError(f"unsupported max_features {max_features!r}")


class TreeRegressor:
    """Binary regression tree, mean leaf values.

    ``criterion`` picks the split score: plain variance reduction
    ("squared_error") or Friedman's improvement ("friedman_mse").
    ``max_features`` draws a fresh random feature subset per node, as
    forests expect.
    """

    def __init__(self, max_depth=None, min_samples_split=2, min_samples_leaf=1,
                 criterion="squared_error", max_features=None):
        if max_depth is not None and max_depth < 1:
            raise LearnError("max_depth must be at least 1")
        if min_samples_split < 2:
            raise LearnError("min_samples_split must be at least 2")
        if min_samples_leaf < 1:
            raise LearnError("min_samples_leaf must be at least 1")
        if criterion not in _CRITERIA:
            raise LearnError(f"criterion must be one of {_CRITERIA}")
        if isinstance(max_features, str) and max_features not in ("sqrt",
                                                                  "log2"):
            raise LearnError(f"unsupported max_features {max_features!r}")
        self.max_depth = None if max_depth is None else int(max_depth)
        self.min_samples_split = int(min_samples_split)
        self.min_samples_leaf = int(min_samples_leaf)
        self.criterion = criterion
        self.max_features = max_features
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.value = None

    # -- fitting --------------------------------------------------------

    def fit(self, X, y, rng=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise LearnError("fit expects X (n, d) and y (n,)")
        if len(X) == 0:
            raise LearnError("cannot fit a tree on zero rows")
        n, d = X.shape
        m_feats = _resolve_max_features(self.max_features, d)
        if m_feats < d and rng is None:
            rng = np.random.default_rng(0)

        feature = [-1]
        threshold = [np.nan]
        left = [-1]
        right = [-1]
        value = [float(y.mean())]

        rows = np.arange(n)
        node_of = np.zeros(n, dtype=np.intp)
        depth = 0
        msl = self.min_samples_leaf

        while len(rows):
            level_nodes = np.unique(node_of)
            n_nodes = len(level_nodes)
            slot = np.searchsorted(level_nodes, node_of)

            counts = np.bincount(slot, minlength=n_nodes)
            splittable = counts >= self.min_samples_split
            if self.max_depth is not None and depth >= self.max_depth:
                splittable[:] = False

            best_gain = np.full(n_nodes, -np.inf)
            best_feat = np.full(n_nodes, -1, dtype=np.intp)
            best_thr = np.full(n_nodes, np.nan)
            best_stats = np.zeros((n_nodes, 4))  # nl, sl, nr, sr

            if splittable.any():
                if m_feats < d:
                    draw = rng.random((n_nodes, d))
                    allowed = draw <= np.sort(draw, axis=1)[:, m_feats - 1][:, None]
                else:
                    allowed = None
                y_act = y[rows]
                for f in range(d):
                    self._scan_feature(
                        f, X[rows, f], y_act, slot, n_nodes, msl, splittable,
                        allowed, best_gain, best_feat, best_thr, best_stats)

            splits = best_feat >= 0
            if not splits.any():
                break

            # materialize this level's split nodes and their children
            child_left = np.full(n_nodes, -1, dtype=np.intp)
            child_right = np.full(n_nodes, -1, dtype=np.intp)
            for s in np.nonzero(splits)[0]:
                parent = int(level_nodes[s])
                feature[parent] = int(best_feat[s])
                threshold[parent] = float(best_thr[s])
                nl, sl, nr, sr = best_stats[s]
                child_left[s] = len(feature)
                left[parent] = len(feature)
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                value.append(sl / nl)
                child_right[s] = len(feature)
                right[parent] = len(feature)
                feature.append(-1)
                threshold.append(np.nan)
                left.append(-1)
                right.append(-1)
                value.append(sr / nr)

            live = splits[slot]
            rows = rows[live]
            slot = slot[live]
            go_left = X[rows, best_feat[slot]] <= best_thr[slot]
            node_of = np.where(go_left, child_left[slot], child_right[slot])
            depth += 1

        self.feature = np.array(feature, dtype=np.intp)
        self.threshold = np.array(threshold)
        self.left = np.array(left, dtype=np.intp)
        self.right = np.array(right, dtype=np.intp)
        self.value = np.array(value)
        return self

    def _scan_feature(self, f, xf, y_act, slot, n_nodes, msl, splittable,
                      allowed, best_gain, best_feat, best_thr, best_stats):
        """Score every candidate threshold of feature f for all level nodes."""
        order = np.lexsort((xf, slot))
        xv = xf[order]
        yv = y_act[order]
        sg = slot[order]
        n_act = len(xv)

        starts = np.flatnonzero(np.diff(sg)) + 1
        starts = np.concatenate([[0], starts])
        seg_cnt = np.diff(np.append(starts, n_act))
        seg_sum = np.add.reduceat(yv, starts)
        seg_of = np.repeat(np.arange(len(starts)), seg_cnt)
        # level_nodes are sorted, so segment order equals slot order
        node_slot = sg[starts]

        cy = np.cumsum(yv)
        pos = np.arange(n_act)
        nl = pos - starts[seg_of] + 1
        base = np.where(starts > 0, cy[np.maximum(starts - 1, 0)], 0.0)
        sl = cy - base[seg_of]
        nr = seg_cnt[seg_of] - nl
        sr = seg_sum[seg_of] - sl

        valid = (nl >= msl) & (nr >= msl) & splittable[node_slot[seg_of]]
        valid[:-1] &= (seg_of[:-1] == seg_of[1:]) & (xv[:-1] < xv[1:])
        if n_act:
            valid[-1] = False
        if allowed is not None:
            valid &= allowed[node_slot[seg_of], f]

        nl_s = np.maximum(nl, 1)
        nr_s = np.maximum(nr, 1)
        if self.criterion == "squared_error":
            score = sl ** 2 / nl_s + sr ** 2 / nr_s
            gain = score - (seg_sum ** 2 / seg_cnt)[seg_of]
        else:
            diff = sl / nl_s - sr / nr_s
            gain = nl * nr / (nl + nr) * diff ** 2
        mean_scale = (seg_sum / seg_cnt)[seg_of] ** 2 + 1.0
        gain = np.where(valid & (gain > 1e-12 * mean_scale), gain, -np.inf)

        seg_best = np.maximum.reduceat(gain, starts)
        improved = seg_best > best_gain[node_slot]
        if not improved.any():
            return
        hit = gain == seg_best[seg_of]
        hit_pos = np.flatnonzero(hit)
        seg_u, first = np.unique(seg_of[hit_pos], return_index=True)
        best_pos = np.full(len(starts), -1, dtype=np.intp)
        best_pos[seg_u] = hit_pos[first]

        for s in np.nonzero(improved)[0]:
            p = best_pos[s]
            if p < 0:
                continue
            ns = node_slot[s]
            best_gain[ns] = gain[p]
            best_feat[ns] = f
            best_thr[ns] = 0.5 * (xv[p] + xv[p + 1])
            best_stats[ns] = (nl[p], sl[p], nr[p], sr[p])

    # -- inference ------------------------------------------------------

    def _descend(self, X):
        if self.feature is None:
            raise LearnError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.intp)
        while True:
            active = np.flatnonzero(self.feature[node] >= 0)
            if not len(active):
                return node
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])

    def predict(self, X):
        return self.value[self._descend(X)]

    def apply(self, X):
        """Leaf node id per row."""
        return self._descend(X)

    def set_leaf_values(self, leaf_ids, new_values):
        """Overwrite leaf predictions (used by boosted-tree line search)."""
        leaf_ids = np.asarray(leaf_ids, dtype=np.intp)
        if (self.feature[leaf_ids] >= 0).any():
            raise LearnError("can only assign values to leaf nodes")
        self.value[leaf_ids] = np.asarray(new_values, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return 0 if self.feature is None else len(self.feature)

    # -- serialization ----------------------------------------------------

    def params(self):
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left, "right": self.right, "value": self.value}

    @classmethod
    def from_params(cls, hyper, arrays):
        model = cls(**hyper)
        model.feature = np.asarray(arrays["feature"], dtype=np.intp)
        model.threshold = np.asarray(arrays["threshold"], dtype=np.float64)
        model.left = np.asarray(arrays["left"], dtype=np.intp)
        model.right = np.asarray(arrays["right"], dtype=np.intp)
        model.value = np.asarray(arrays["value"], dtype=np.float64)
        return model
