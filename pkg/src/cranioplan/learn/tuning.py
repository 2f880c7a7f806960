"""Sequential model-based hyperparameter search.

The search starts from ``n_init`` random draws of the declared
distributions, then repeatedly fits a Gaussian process (squared
exponential kernel with per-dimension length scales, maximum
likelihood hyperparameters) to the scores seen so far and evaluates
the candidate that maximizes expected improvement over a random pool.
Hyperparameters are normalized to the unit cube; categorical choices
are one-hot blocks. The default objective is mean k-fold CV R².
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from .dataset import Dataset
from .exceptions import LearnError
from .model import KINDS, RegressorSpec, kfold_cv

__all__ = ["ParamSpec", "SearchSpace", "Trial", "TuneResult",
           "default_space", "tune"]

_EI_XI = 0.01
_POOL = 512


@dataclass(frozen=True)
class ParamSpec:
    """One searched hyperparameter: uniform float, uniform int, or categorical."""

    name: str
    kind: str
    low: float = 0.0
    high: float = 0.0
    choices: tuple = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "int", "categorical"):
            raise LearnError(f"unknown parameter kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.choices) < 2:
                raise LearnError(f"{self.name}: need at least 2 choices")
        elif not (self.low < self.high):
            raise LearnError(f"{self.name}: require low < high")

    @property
    def width(self) -> int:
        """Dimensions this parameter occupies in the unit cube."""
        return len(self.choices) if self.kind == "categorical" else 1

    def decode(self, u: np.ndarray):
        if self.kind == "uniform":
            return float(self.low + u[0] * (self.high - self.low))
        if self.kind == "int":
            span = int(self.high) - int(self.low) + 1
            return int(self.low) + min(int(u[0] * span), span - 1)
        return self.choices[int(np.argmax(u))]


@dataclass(frozen=True)
class SearchSpace:
    model_kind: str
    params: tuple
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_kind not in KINDS:
            raise LearnError(f"model_kind must be one of {KINDS}")
        if not self.params:
            raise LearnError("search space has no parameters")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise LearnError("duplicate parameter names")
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "fixed", dict(self.fixed))

    @property
    def n_dims(self) -> int:
        return sum(p.width for p in self.params)

    def decode(self, u: np.ndarray) -> dict:
        hyper = dict(self.fixed)
        offset = 0
        for p in self.params:
            hyper[p.name] = p.decode(u[offset:offset + p.width])
            offset += p.width
        return hyper


def default_space(kind: str) -> SearchSpace:
    """Declared search distributions for the tunable model kinds."""
    if kind == "FOREST":
        return SearchSpace("FOREST", (
            ParamSpec("n_estimators", "int", 10, 150),
            ParamSpec("max_depth", "int", 5, 20),
            ParamSpec("min_samples_split", "int", 2, 10),
            ParamSpec("min_samples_leaf", "int", 1, 5),
        ))
    if kind == "GBOOST":
        return SearchSpace("GBOOST", (
            ParamSpec("n_estimators", "int", 10, 500),
            ParamSpec("learning_rate", "uniform", 0.01, 1.0),
            ParamSpec("loss", "categorical",
                      choices=("squared_error", "absolute_error", "huber",
                               "quantile")),
            ParamSpec("criterion", "categorical",
                      choices=("friedman_mse", "squared_error")),
        ))
    if kind == "SVR":
        return SearchSpace("SVR", (
            ParamSpec("C", "uniform", 0.01, 5.0),
            ParamSpec("epsilon", "uniform", 0.0, 5.0),
            ParamSpec("degree", "int", 1, 9),
            ParamSpec("gamma", "categorical", choices=("scale", "auto")),
            ParamSpec("kernel", "categorical",
                      choices=("linear", "poly", "rbf", "sigmoid")),
        ))
    raise LearnError(f"no declared search space for {kind}")


# -- Gaussian process on the unit cube --------------------------------------


def _sq_dists(A, B, inv_scales):
    d = A[:, None, :] - B[None, :, :]
    return np.sum((d * inv_scales) ** 2, axis=2)


def _gp_nll(log_params, X, y):
    d = X.shape[1]
    ls = np.exp(log_params[:d])
    sf2 = np.exp(log_params[d])
    sn2 = np.exp(log_params[d + 1])
    K = sf2 * np.exp(-0.5 * _sq_dists(X, X, 1.0 / ls))
    K[np.diag_indices_from(K)] += sn2 + 1e-10
    try:
        chol = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return 1e10
    alpha = cho_solve(chol, y)
    return float(0.5 * y @ alpha + np.log(np.diag(chol[0])).sum()
                 + 0.5 * len(y) * np.log(2 * np.pi))


def _gp_fit(X, y, rng):
    d = X.shape[1]
    best = None
    for _ in range(3):
        x0 = np.concatenate([
            rng.uniform(np.log(0.1), np.log(2.0), size=d),
            [np.log(1.0)], [np.log(1e-3)],
        ])
        res = minimize(_gp_nll, x0, args=(X, y), method="L-BFGS-B",
                       bounds=[(np.log(1e-2), np.log(10.0))] * d
                       + [(np.log(1e-4), np.log(1e2)),
                          (np.log(1e-8), np.log(1.0))])
        if best is None or res.fun < best.fun:
            best = res
    return best.x


def _gp_posterior(log_params, X, y, Xq):
    d = X.shape[1]
    ls = np.exp(log_params[:d])
    sf2 = np.exp(log_params[d])
    sn2 = np.exp(log_params[d + 1])
    K = sf2 * np.exp(-0.5 * _sq_dists(X, X, 1.0 / ls))
    K[np.diag_indices_from(K)] += sn2 + 1e-10
    Kq = sf2 * np.exp(-0.5 * _sq_dists(Xq, X, 1.0 / ls))
    chol = cho_factor(K, lower=True)
    mu = Kq @ cho_solve(chol, y)
    v = cho_solve(chol, Kq.T)
    var = np.maximum(sf2 - np.sum(Kq.T * v, axis=0), 1e-12)
    return mu, np.sqrt(var)


def _expected_improvement(mu, sigma, best):
    imp = mu - best - _EI_XI
    z = imp / sigma
    return imp * norm.cdf(z) + sigma * norm.pdf(z)


# -- the search --------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    hyperparameters: dict
    score: float


@dataclass(frozen=True)
class TuneResult:
    best_spec: RegressorSpec
    best_score: float
    trials: tuple

    @property
    def best_so_far(self):
        out, cur = [], -np.inf
        for t in self.trials:
            cur = max(cur, t.score)
            out.append(cur)
        return out


def tune(space: SearchSpace, train: Dataset, budget: int, seed: int = 0,
         k: int = 5, n_init: int = 10, objective=None) -> TuneResult:
    """Run the search for ``budget`` evaluations and return the argmax.

    ``objective`` maps a RegressorSpec to the score to maximize; by
    default it is the mean ``k``-fold CV R² on ``train``.
    """
    if budget < n_init:
        raise LearnError(f"budget {budget} is below the {n_init} initial points")

    if objective is None:
        if train is None:
            raise LearnError("tune needs a dataset unless an objective is given")

        def objective(spec):
            return kfold_cv(spec, train, k=k, seed=seed).mean.r2

    rng = np.random.default_rng(seed)
    dims = space.n_dims
    points = list(rng.random((n_init, dims)))
    trials = []
    for u in points:
        spec = RegressorSpec(space.model_kind, space.decode(u))
        trials.append(Trial(spec.hyperparameters, float(objective(spec))))

    while len(trials) < budget:
        X = np.array(points)
        y = np.array([t.score for t in trials])
        sd = y.std()
        if sd > 1e-12:
            y_norm = (y - y.mean()) / sd
            log_params = _gp_fit(X, y_norm, rng)
            pool = rng.random((_POOL, dims))
            mu, sigma = _gp_posterior(log_params, X, y_norm, pool)
            u = pool[int(np.argmax(_expected_improvement(mu, sigma,
                                                         y_norm.max())))]
        else:
            u = rng.random(dims)  # flat landscape so far; explore
        points.append(u)
        spec = RegressorSpec(space.model_kind, space.decode(u))
        trials.append(Trial(spec.hyperparameters, float(objective(spec))))

    best = int(np.argmax([t.score for t in trials]))
    return TuneResult(
        best_spec=RegressorSpec(space.model_kind,
                                trials[best].hyperparameters),
        best_score=trials[best].score,
        trials=tuple(trials),
    )
