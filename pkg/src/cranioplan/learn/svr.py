"""Epsilon-insensitive support vector regression.

The dual problem is solved by sequential minimal optimization over the
paired coefficients (alpha, alpha*), picking the most violating pair
each step and solving its two-variable subproblem in closed form. The
bias is the midpoint of the final KKT bracket. Stopping follows the
documented convention: maximal KKT violation below ``tol`` or 10 * n
iterations.

``gamma`` accepts the names "auto" (1 / n_features) and "scale"
(1 / (n_features * var(X))) besides explicit positive numbers.
"""
from __future__ import annotations

import warnings

import numpy as np

from .exceptions import LearnError

__all__ = ["SupportVectorRegressor", "kernel_matrix", "resolve_gamma"]

KERNELS = ("linear", "poly", "rbf", "sigmoid")


def resolve_gamma(gamma, X) -> float:
    d = X.shape[1]
    if gamma == "auto":
        return 1.0 / d
    if gamma == "scale":
        var = float(X.var())
        return 1.0 / (d * var) if var > 0 else 1.0 / d
    value = float(gamma)
    if value <= 0:
        raise LearnError("gamma must be positive")
    return value


def kernel_matrix(kind: str, gamma: float, degree: int, coef0: float,
                  X, Z=None) -> np.ndarray:
    """Gram matrix K[i, j] = k(X[i], Z[j]); Z defaults to X."""
    X = np.asarray(X, dtype=np.float64)
    Z = X if Z is None else np.asarray(Z, dtype=np.float64)
    if kind == "linear":
        return X @ Z.T
    if kind == "poly":
        return (gamma * (X @ Z.T) + coef0) ** degree
    if kind == "sigmoid":
        return np.tanh(gamma * (X @ Z.T) + coef0)
    if kind == "rbf":
        sq = (np.sum(X ** 2, axis=1)[:, None] + np.sum(Z ** 2, axis=1)[None, :]
              - 2.0 * (X @ Z.T))
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise LearnError(f"kernel must be one of {KERNELS}")


class SupportVectorRegressor:
    """Single-target epsilon-SVR trained by SMO."""

    def __init__(self, C=1.0, epsilon=0.1, kernel="rbf", degree=3,
                 gamma="scale", coef0=0.0, tol=1e-3, max_iter=None):
        if C <= 0:
            raise LearnError("C must be positive")
        if epsilon < 0:
            raise LearnError("epsilon must be non-negative")
        if kernel not in KERNELS:
            raise LearnError(f"kernel must be one of {KERNELS}")
        if int(degree) < 1:
            raise LearnError("degree must be at least 1")
        self.C = float(C)
        self.epsilon = float(epsilon)
        self.kernel = kernel
        self.degree = int(degree)
        self.gamma = gamma
        self.coef0 = float(coef0)
        self.tol = float(tol)
        self.max_iter = max_iter
        self.gamma_value = None
        self.sv_X = None
        self.coef = None
        self.intercept = 0.0
        self.n_iter = 0
        self.converged = False

    def fit(self, X, y, rng=None, gram=None):
        """Train on (X, y); ``gram`` may supply the precomputed kernel."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise LearnError("fit expects X (n, d) and y (n,)")
        n = len(y)
        if n < 2:
            raise LearnError("need at least 2 rows")
        self.gamma_value = resolve_gamma(self.gamma, X)
        if gram is None:
            gram = kernel_matrix(self.kernel, self.gamma_value, self.degree,
                                 self.coef0, X)
        elif gram.shape != (n, n):
            raise LearnError("precomputed kernel has the wrong shape")

        C, eps = self.C, self.epsilon
        # floor keeps small problems from hitting the cap before the
        # tolerance; each pass is O(n), so the floor costs little
        max_iter = max(10 * n, 20000) if self.max_iter is None \
            else int(self.max_iter)
        alpha = np.zeros(n)
        astar = np.zeros(n)
        E = -y.copy()  # K beta - y with beta = 0
        neg_inf = -np.inf
        pos_inf = np.inf

        it = 0
        m = M = 0.0
        while True:
            # "up" moves increase beta: raise alpha (< C) or cut alpha* (> 0)
            up_a = np.where(alpha < C, -E - eps, neg_inf)
            up_s = np.where(astar > 0, -E + eps, neg_inf)
            up = np.maximum(up_a, up_s)
            u = int(np.argmax(up))
            m = up[u]

            # "down" moves decrease beta: cut alpha (> 0) or raise alpha* (< C)
            dn_a = np.where(alpha > 0, -E - eps, pos_inf)
            dn_s = np.where(astar < C, -E + eps, pos_inf)
            dn = np.minimum(dn_a, dn_s)
            w = int(np.argmin(dn))
            M = dn[w]

            if m - M < self.tol:
                self.converged = True
                break
            if it >= max_iter:
                warnings.warn(
                    f"SMO hit the iteration cap ({max_iter}) with KKT "
                    f"violation {m - M:.2e}", stacklevel=2)
                break

            u_via_alpha = up_a[u] >= up_s[u]
            w_via_alpha = dn_a[w] <= dn_s[w]

            quad = gram[u, u] + gram[w, w] - 2.0 * gram[u, w]
            step = (m - M) / quad if quad > 1e-12 else pos_inf
            step = min(step,
                       (C - alpha[u]) if u_via_alpha else astar[u],
                       alpha[w] if w_via_alpha else (C - astar[w]))

            snap = 1e-12 * C
            if u_via_alpha:
                alpha[u] += step
                if C - alpha[u] < snap:
                    alpha[u] = C
            else:
                astar[u] -= step
                if astar[u] < snap:
                    astar[u] = 0.0
            if w_via_alpha:
                alpha[w] -= step
                if alpha[w] < snap:
                    alpha[w] = 0.0
            else:
                astar[w] += step
                if C - astar[w] < snap:
                    astar[w] = C
            E += step * (gram[:, u] - gram[:, w])
            it += 1

        self.n_iter = it
        self.intercept = 0.5 * (m + M)
        beta = alpha - astar
        support = np.abs(beta) > 1e-12
        self.sv_X = X[support].copy()
        self.coef = beta[support]
        return self

    def predict(self, X):
        if self.coef is None:
            raise LearnError("predict before fit")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or (self.sv_X is not None
                           and X.shape[1] != self.sv_X.shape[1]):
            raise LearnError(
                f"predict expects {self.sv_X.shape[1]} feature columns")
        if len(self.coef) == 0:
            return np.full(len(X), self.intercept)
        k = kernel_matrix(self.kernel, self.gamma_value, self.degree,
                          self.coef0, X, self.sv_X)
        return k @ self.coef + self.intercept

    def params(self):
        return {"sv_X": self.sv_X,
                "coef": self.coef,
                "intercept": np.array([self.intercept]),
                "gamma_value": np.array([self.gamma_value])}

    @classmethod
    def from_params(cls, hyper, arrays):
        model = cls(**hyper)
        model.sv_X = np.asarray(arrays["sv_X"], dtype=np.float64)
        model.coef = np.asarray(arrays["coef"], dtype=np.float64)
        model.intercept = float(arrays["intercept"][0])
        model.gamma_value = float(arrays["gamma_value"][0])
        return model
