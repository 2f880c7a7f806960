"""Multi-output regression surrogate for the planning pipeline."""
from .dataset import (BASE_FEATURES, Dataset, feature_names,
                      read_dataset_csv, target_names, write_dataset_csv)
from .exceptions import LearnError
from .metrics import Metrics, compute_metrics, mean_absolute_error, \
    mean_squared_error, r2_score
from .model import (KINDS, CVResult, RegressorSpec, SurrogateModel, evaluate,
                    fit, kfold_cv, load_model, save_model)
from .scaling import ScalerParams, apply_scaler, fit_scaler, invert_scaler
from .split import kfold_indices, split, split_indices
from .tuning import (ParamSpec, SearchSpace, Trial, TuneResult, default_space,
                     tune)

__all__ = [
    "BASE_FEATURES", "CVResult", "Dataset", "KINDS", "LearnError", "Metrics",
    "ParamSpec", "RegressorSpec", "ScalerParams", "SearchSpace",
    "SurrogateModel", "Trial", "TuneResult", "apply_scaler",
    "compute_metrics", "default_space", "evaluate", "feature_names", "fit",
    "fit_scaler", "invert_scaler", "kfold_cv", "kfold_indices", "load_model",
    "mean_absolute_error", "mean_squared_error", "r2_score",
    "read_dataset_csv", "save_model", "split", "split_indices",
    "target_names", "tune", "write_dataset_csv",
]
