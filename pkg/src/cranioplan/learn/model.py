"""Multi-output surrogate: spec, fitted model, metrics, CV, and file form.

A surrogate wraps one independently fitted regressor per target column
behind shared feature and target standardization. Metrics are computed
on the standardized target scale, so reported errors are in units of
training-target standard deviations; R² is unaffected by the scaling.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .boosting import GradientBoostingRegressor
from .dataset import Dataset
from .exceptions import LearnError
from .forest import ForestRegressor
from .linear import LinearRegressor
from .metrics import Metrics, compute_metrics
from .scaling import ScalerParams, apply_scaler, fit_scaler, invert_scaler
from .split import kfold_indices
from .svr import SupportVectorRegressor, kernel_matrix, resolve_gamma
from .tree import TreeRegressor

__all__ = ["KINDS", "RegressorSpec", "SurrogateModel", "CVResult",
           "fit", "evaluate", "kfold_cv", "save_model", "load_model"]

KINDS = ("LINEAR", "TREE", "FOREST", "GBOOST", "SVR")

_ESTIMATORS = {
    "LINEAR": LinearRegressor,
    "TREE": TreeRegressor,
    "FOREST": ForestRegressor,
    "GBOOST": GradientBoostingRegressor,
    "SVR": SupportVectorRegressor,
}

_ALLOWED_KEYS = {
    "LINEAR": set(),
    "TREE": {"max_depth", "min_samples_split", "min_samples_leaf",
             "criterion", "max_features"},
    "FOREST": {"n_estimators", "max_depth", "min_samples_split",
               "min_samples_leaf", "max_features"},
    "GBOOST": {"n_estimators", "learning_rate", "loss", "criterion",
               "max_depth", "min_samples_split", "min_samples_leaf", "alpha"},
    "SVR": {"C", "epsilon", "kernel", "degree", "gamma", "coef0", "tol",
            "max_iter"},
}

_MAGIC = b"CSUR"
_VERSION = 1
_GAMMA_NOTE = "gamma auto = 1/n_features; scale = 1/(n_features * var(X))"


@dataclass(frozen=True)
class RegressorSpec:
    """Model kind plus its hyperparameters."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LearnError(f"kind must be one of {KINDS}, got {self.kind!r}")
        hyper = dict(self.hyperparameters)
        unknown = set(hyper) - _ALLOWED_KEYS[self.kind]
        if unknown:
            raise LearnError(
                f"{self.kind} does not accept hyperparameters {sorted(unknown)}")
        object.__setattr__(self, "hyperparameters", hyper)

    def make_estimator(self):
        return _ESTIMATORS[self.kind](**self.hyperparameters)


@dataclass
class SurrogateModel:
    """Fitted multi-output regressor with its scalers and provenance."""

    spec: RegressorSpec
    feature_scaler: ScalerParams
    target_scaler: ScalerParams
    regressors: tuple
    feature_names: tuple
    target_names: tuple
    metadata: dict

    @property
    def n_targets(self) -> int:
        return len(self.regressors)

    def _predict_scaled(self, X) -> np.ndarray:
        Xs = apply_scaler(self.feature_scaler, X)
        return np.column_stack([reg.predict(Xs) for reg in self.regressors])

    def predict(self, X) -> np.ndarray:
        """Predict raw target values for the given feature rows."""
        out = invert_scaler(self.target_scaler, self._predict_scaled(X))
        if not np.isfinite(out).all():
            raise LearnError("prediction produced non-finite values")
        return out


def fit(spec: RegressorSpec, train: Dataset, seed: int = 0) -> SurrogateModel:
    """Fit one regressor per target on the standardized training data."""
    feature_scaler = fit_scaler(train.X, train.feature_names)
    target_scaler = fit_scaler(train.Y, train.target_names)
    Xs = apply_scaler(feature_scaler, train.X)
    Ys = apply_scaler(target_scaler, train.Y)

    gram = None
    if spec.kind == "SVR":
        probe = spec.make_estimator()  # validates hyperparameters up front
        gram = kernel_matrix(probe.kernel, resolve_gamma(probe.gamma, Xs),
                             probe.degree, probe.coef0, Xs)

    streams = np.random.SeedSequence(seed).spawn(train.n_targets)
    regressors = []
    for j in range(train.n_targets):
        est = spec.make_estimator()
        rng = np.random.default_rng(streams[j])
        if gram is not None:
            est.fit(Xs, Ys[:, j], rng=rng, gram=gram)
        else:
            est.fit(Xs, Ys[:, j], rng=rng)
        regressors.append(est)

    metadata = {"seed": int(seed), "n_train": train.n_rows,
                "gamma_convention": _GAMMA_NOTE}
    return SurrogateModel(
        spec=spec,
        feature_scaler=feature_scaler,
        target_scaler=target_scaler,
        regressors=tuple(regressors),
        feature_names=train.feature_names,
        target_names=train.target_names,
        metadata=metadata,
    )


def evaluate(model: SurrogateModel, test: Dataset) -> Metrics:
    """Metrics on the standardized target scale; R² is scale-free."""
    if test.target_names != model.target_names:
        raise LearnError("test targets do not match the model")
    y_true = apply_scaler(model.target_scaler, test.Y)
    y_pred = model._predict_scaled(test.X)
    return compute_metrics(y_true, y_pred)


@dataclass(frozen=True)
class CVResult:
    folds: tuple
    mean: Metrics
    sd_r2: float
    sd_mse: float
    sd_mae: float


def kfold_cv(spec: RegressorSpec, train: Dataset, k: int = 5,
             seed: int = 0) -> CVResult:
    """Cross-validate; every fold refits its own scalers, so no row of a
    validation fold ever influences standardization or training."""
    folds = []
    for train_idx, val_idx in kfold_indices(train.n_rows, k, seed):
        model = fit(spec, train.take(train_idx), seed=seed)
        folds.append(evaluate(model, train.take(val_idx)))
    r2 = np.array([m.r2 for m in folds])
    mse = np.array([m.mse for m in folds])
    mae = np.array([m.mae for m in folds])
    return CVResult(
        folds=tuple(folds),
        mean=Metrics(r2=float(r2.mean()), mse=float(mse.mean()),
                     mae=float(mae.mean())),
        sd_r2=float(r2.std(ddof=1)),
        sd_mse=float(mse.std(ddof=1)),
        sd_mae=float(mae.std(ddof=1)),
    )


# -- model file ------------------------------------------------------------


def save_model(model: SurrogateModel, path) -> None:
    header = {
        "kind": model.spec.kind,
        "hyperparameters": model.spec.hyperparameters,
        "feature_names": list(model.feature_names),
        "target_names": list(model.target_names),
        "feature_scaler": {"mean": model.feature_scaler.mean.tolist(),
                           "sd": model.feature_scaler.sd.tolist()},
        "target_scaler": {"mean": model.target_scaler.mean.tolist(),
                          "sd": model.target_scaler.sd.tolist()},
        "metadata": model.metadata,
        "n_targets": model.n_targets,
    }
    header_bytes = json.dumps(header).encode()

    arrays = {}
    for j, reg in enumerate(model.regressors):
        for key, arr in reg.params().items():
            arrays[f"t{j}/{key}"] = np.asarray(arr)
    buf = io.BytesIO()
    np.savez(buf, **arrays)

    payload = (_MAGIC + struct.pack("<IQ", _VERSION, len(header_bytes))
               + header_bytes + buf.getvalue())
    if hasattr(path, "write"):
        path.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def load_model(path) -> SurrogateModel:
    if hasattr(path, "read"):
        blob = path.read()
    else:
        with open(path, "rb") as fh:
            blob = fh.read()
    if blob[:4] != _MAGIC:
        raise LearnError(f"{path}: not a surrogate model file")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != _VERSION:
        raise LearnError(f"{path}: unsupported model file version {version}")
    header = json.loads(blob[16:16 + header_len].decode())
    arrays = dict(np.load(io.BytesIO(blob[16 + header_len:]),
                          allow_pickle=False))

    spec = RegressorSpec(header["kind"], header["hyperparameters"])
    cls = _ESTIMATORS[spec.kind]
    regressors = []
    for j in range(header["n_targets"]):
        prefix = f"t{j}/"
        sub = {key[len(prefix):]: arr for key, arr in arrays.items()
               if key.startswith(prefix)}
        regressors.append(cls.from_params(spec.hyperparameters, sub))
    return SurrogateModel(
        spec=spec,
        feature_scaler=ScalerParams(np.array(header["feature_scaler"]["mean"]),
                                    np.array(header["feature_scaler"]["sd"])),
        target_scaler=ScalerParams(np.array(header["target_scaler"]["mean"]),
                                   np.array(header["target_scaler"]["sd"])),
        regressors=tuple(regressors),
        feature_names=tuple(header["feature_names"]),
        target_names=tuple(header["target_names"]),
        metadata=header["metadata"],
    )
