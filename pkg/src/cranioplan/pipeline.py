"""Staged build pipeline: cohort, sweep, shape models, dataset, surrogate.

Every stage reads its inputs from the run directory, writes its
artifacts there, and records them (with content hashes) in a manifest,
so a rerun with the same configuration reproduces the same bytes and a
missing prerequisite fails with the name of the stage that makes it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .cohort import (PopulationParams, generate_cohort, generate_patient,
                     head_to_skull, params_from_manifest_row,
                     read_cohort_manifest, template_dome,
                     write_cohort_manifest)
from .design import (ParamSpace, PlanEntry, read_plan_csv, sample_plan,
                     write_plan_csv)
from .learn import (Dataset, RegressorSpec, SurrogateModel, default_space,
                    evaluate, feature_names, fit, kfold_cv, load_model,
                    read_dataset_csv, save_model, split, target_names, tune,
                    write_dataset_csv)
from .mesh import MeshError, TriMesh, compute_cephalic_index
from .shape_model import (ShapeModel, build_shape_model, devectorize,
                          load_shape_model, reconstruct, save_shape_model,
                          select_modes, truncate_modes, vectorize)
from .simulator import MaterialConfig, SimulationError, simulate_surgery
from .stl import load_stl, save_stl

__all__ = [
    "PipelineError", "PipelineConfig", "RunPaths", "load_config",
    "default_config", "config_digest", "load_manifest", "param_space_of",
    "material_config_of", "request_bounds", "validate_request",
    "request_features", "file_sha256", "require_artifact",
    "verify_ssm_hashes", "run_synth_cohort", "run_simulate", "run_build_ssm",
    "run_assemble", "run_train", "run_tune", "run_evaluate", "run_predict",
    "STAGES",
]


class PipelineError(RuntimeError):
    """A stage cannot run or produced inconsistent artifacts."""


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class CohortSettings:
    n_patients: int = 31
    seed: int = 20240
    resolution: int = 24


@dataclass(frozen=True)
class DoeSettings:
    n_configs: int = 76
    seed: int = 77
    candidates: int = 20
    a_range: tuple = (0.18, 0.30)
    ap_range: tuple = (0.47, 0.63)
    lat_range: tuple = (0.10, 0.25)


@dataclass(frozen=True)
class SimSettings:
    stiffness_scale: float = 400.0
    suture_ratio: float = 0.1
    t_skull: float = 2.02
    t_skin: float = 3.42
    tol: float = 1e-2
    max_iters: int = 4000
    workers: int = 0  # 0 means one per CPU


@dataclass(frozen=True)
class SsmSettings:
    input_threshold: float = 0.94
    output_threshold: float = 0.90
    # 0 selects the mode count from the threshold; a positive value
    # forces that many modes (capped at what the samples support)
    modes_in: int = 11
    modes_out: int = 11


@dataclass(frozen=True)
class MlSettings:
    test_fraction: float = 0.33
    folds: int = 5
    seed: int = 0
    tuner_budget: int = 25
    kind: str = "SVR"
    hyperparameters: dict = field(default_factory=lambda: {
        "kernel": "rbf", "C": 1.85, "epsilon": 0.0, "gamma": "auto"})


@dataclass(frozen=True)
class PipelineConfig:
    run_dir: str
    cohort: CohortSettings = CohortSettings()
    doe: DoeSettings = DoeSettings()
    sim: SimSettings = SimSettings()
    ssm: SsmSettings = SsmSettings()
    ml: MlSettings = MlSettings()

    def __post_init__(self):
        if not (0.0 < self.ssm.input_threshold <= 1.0
                and 0.0 < self.ssm.output_threshold <= 1.0):
            raise PipelineError("SSM thresholds must lie in (0, 1]")
        if not (0.0 < self.ml.test_fraction < 1.0):
            raise PipelineError("test_fraction must lie in (0, 1)")


_SECTIONS = {
    "cohort": CohortSettings,
    "doe": DoeSettings,
    "sim": SimSettings,
    "ssm": SsmSettings,
    "ml": MlSettings,
}


def default_config(run_dir: str) -> PipelineConfig:
    return PipelineConfig(run_dir=run_dir)


def load_config(path) -> PipelineConfig:
    """Parse a TOML config; unknown sections or keys are rejected."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise PipelineError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise PipelineError(f"{path}: invalid TOML ({exc})") from None

    run_dir = raw.pop("run_dir", None)
    if not run_dir:
        raise PipelineError(f"{path}: top-level 'run_dir' is required")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        table = raw.pop(section, {})
        if not isinstance(table, dict):
            raise PipelineError(f"{path}: [{section}] must be a table")
        allowed = set(cls.__dataclass_fields__)
        unknown = set(table) - allowed
        if unknown:
            raise PipelineError(
                f"{path}: unknown keys {sorted(unknown)} in [{section}]")
        for key in ("a_range", "ap_range", "lat_range"):
            if key in table:
                table[key] = tuple(table[key])
        kwargs[section] = cls(**table)
    if raw:
        raise PipelineError(f"{path}: unknown top-level keys {sorted(raw)}")
    return PipelineConfig(run_dir=run_dir, **kwargs)


def config_digest(cfg: PipelineConfig) -> str:
    """Hash of everything that influences artifact content (not paths)."""
    payload = asdict(cfg)
    payload.pop("run_dir")
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def param_space_of(cfg: PipelineConfig) -> ParamSpace:
    return ParamSpace(a_range=cfg.doe.a_range, ap_range=cfg.doe.ap_range,
                      lat_range=cfg.doe.lat_range)


def material_config_of(cfg: PipelineConfig) -> MaterialConfig:
    return MaterialConfig(bone_edge_stiffness_scale=cfg.sim.stiffness_scale,
                          suture_stiffness_ratio=cfg.sim.suture_ratio,
                          t_skull=cfg.sim.t_skull)


def population_of(cfg: PipelineConfig) -> PopulationParams:
    return PopulationParams(t_skull=cfg.sim.t_skull, t_skin=cfg.sim.t_skin)


# -- artifact layout ----------------------------------------------------------


class RunPaths:
    """Places every artifact of one run under its run directory."""

    def __init__(self, run_dir: str):
        self.run_dir = run_dir

    def _p(self, *parts) -> str:
        return os.path.join(self.run_dir, *parts)

    @property
    def manifest(self): return self._p("manifest.json")

    @property
    def cohort_manifest(self): return self._p("cohort", "manifest.csv")

    @property
    def template(self): return self._p("cohort", "template.stl")

    def head_stl(self, patient_id: str):
        return self._p("cohort", f"{patient_id}_head.stl")

    @property
    def plan(self): return self._p("doe", "plan.csv")

    @property
    def results(self): return self._p("sim", "results.csv")

    @property
    def postop_shapes(self): return self._p("sim", "postop_shapes.npy")

    @property
    def postop_keys(self): return self._p("sim", "postop_keys.csv")

    @property
    def ssm_in(self): return self._p("ssm", "input.cssm")

    @property
    def ssm_out(self): return self._p("ssm", "output.cssm")

    @property
    def dataset(self): return self._p("data", "dataset.csv")

    @property
    def dataset_rows(self): return self._p("data", "rows.csv")

    @property
    def model(self): return self._p("model", "model.bin")

    @property
    def metrics(self): return self._p("model", "metrics.json")

    @property
    def tune_trace(self): return self._p("model", "tune_trace.json")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def require_artifact(path, what: str, prior_stage: str):
    if not os.path.exists(path):
        raise PipelineError(
            f"missing {what} at {path}; run the '{prior_stage}' stage first")


# -- manifest ----------------------------------------------------------------


def load_manifest(paths: RunPaths) -> dict:
    require_artifact(paths.manifest, "run manifest", "synth-cohort")
    with open(paths.manifest) as fh:
        return json.load(fh)


def _record_stage(paths: RunPaths, cfg: PipelineConfig, stage: str,
                  counts: dict, artifact_paths: dict) -> dict:
    digest = config_digest(cfg)
    if os.path.exists(paths.manifest):
        with open(paths.manifest) as fh:
            manifest = json.load(fh)
        if manifest["config_hash"] != digest:
            raise PipelineError(
                "run directory was built with a different configuration "
                f"(manifest {manifest['config_hash'][:12]}, current "
                f"{digest[:12]}); use a fresh run directory")
    else:
        manifest = {"run_id": digest[:12], "config_hash": digest,
                    "created_at": _now(), "stages": {}}

    artifacts = {}
    for name, path in artifact_paths.items():
        artifacts[name] = {
            "path": os.path.relpath(path, paths.run_dir),
            "sha256": file_sha256(path),
        }
    manifest["stages"][stage] = {
        "completed_at": _now(),
        "counts": counts,
        "artifacts": artifacts,
    }
    tmp = paths.manifest + ".tmp"
    os.makedirs(paths.run_dir, exist_ok=True)
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, paths.manifest)
    return manifest


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


# -- stage: synth-cohort -----------------------------------------------------


def run_synth_cohort(cfg: PipelineConfig) -> dict:
    """Generate the synthetic cohort and write heads plus the manifest."""
    paths = RunPaths(cfg.run_dir)
    os.makedirs(os.path.dirname(paths.cohort_manifest), exist_ok=True)

    records = generate_cohort(cfg.cohort.n_patients, cfg.cohort.seed,
                              resolution=cfg.cohort.resolution)
    save_stl(template_dome(cfg.cohort.resolution), paths.template)
    mesh_paths = {}
    for rec in records:
        rel = os.path.join("cohort", f"{rec.patient_id}_head.stl")
        save_stl(rec.head, paths.head_stl(rec.patient_id))
        mesh_paths[rec.patient_id] = rel
    write_cohort_manifest(paths.cohort_manifest, records, mesh_paths)

    counts = {"patients": len(records)}
    _record_stage(paths, cfg, "synth-cohort", counts, {
        "cohort_manifest": paths.cohort_manifest,
        "template": paths.template,
    })
    return counts


# -- stage: simulate ----------------------------------------------------------


def _patient_head(row: dict, resolution: int) -> TriMesh:
    """Regenerate a cohort head exactly from its manifest parameters.

    The STL files are for inspection; simulation regenerates geometry
    so plate labels and full float precision survive.
    """
    return generate_patient(params_from_manifest_row(row),
                            resolution=resolution)


def _simulate_one_patient(task):
    row, entries, cfg = task
    head = _patient_head(row, cfg.cohort.resolution)
    skull = head_to_skull(head, population_of(cfg))
    materials = material_config_of(cfg)
    ci_pre = compute_cephalic_index(head)

    rows, shapes = [], []
    for entry in entries:
        try:
            result = simulate_surgery(
                skull, entry.config, materials=materials,
                t_skin=cfg.sim.t_skin, tol=cfg.sim.tol,
                max_iters=cfg.sim.max_iters)
        except (MeshError, SimulationError) as exc:
            rows.append([entry.patient_id, entry.config_id, 0,
                         repr(float("nan")), 0, repr(float("nan")),
                         repr(ci_pre), repr(float("nan")),
                         type(exc).__name__])
            continue
        ok = int(result.equilibrium.converged)
        rows.append([
            entry.patient_id, entry.config_id, ok,
            repr(result.equilibrium.residual),
            result.equilibrium.iterations,
            repr(result.gap_opening_mm),
            repr(ci_pre),
            repr(compute_cephalic_index(result.head)),
            "",
        ])
        if ok:
            shapes.append((entry.patient_id, entry.config_id,
                           vectorize(result.head)))
    return row["patient_id"], rows, shapes


_RESULT_COLUMNS = ["patient_id", "config_id", "converged", "residual",
                   "iterations", "gap_opening_mm", "ci_pre", "ci_post",
                   "error"]


def run_simulate(cfg: PipelineConfig) -> dict:
    """Sample per-patient design plans and run the full sweep."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.cohort_manifest, "cohort manifest", "synth-cohort")
    cohort_rows = read_cohort_manifest(paths.cohort_manifest)
    space = param_space_of(cfg)

    all_entries = []
    per_patient = []
    for i, row in enumerate(cohort_rows):
        seed = cfg.doe.seed + i
        plan = sample_plan(cfg.doe.n_configs, space, seed=seed,
                           candidates=cfg.doe.candidates)
        entries = [
            PlanEntry(patient_id=row["patient_id"],
                      config_id=f"{row['patient_id']}-c{j:03d}",
                      config=config, seed=seed)
            for j, config in enumerate(plan.configs)
        ]
        all_entries.extend(entries)
        per_patient.append((row, entries, cfg))

    os.makedirs(os.path.dirname(paths.plan), exist_ok=True)
    write_plan_csv(all_entries, paths.plan)

    workers = cfg.sim.workers or os.cpu_count() or 1
    if workers > 1 and len(per_patient) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_simulate_one_patient, per_patient))
    else:
        outputs = [_simulate_one_patient(t) for t in per_patient]
    outputs.sort(key=lambda item: item[0])

    os.makedirs(os.path.dirname(paths.results), exist_ok=True)
    result_rows, keys, vectors = [], [], []
    for _, rows, shapes in outputs:
        result_rows.extend(rows)
        for pid, cid, vec in shapes:
            keys.append((pid, cid))
            vectors.append(vec)
    with open(paths.results, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_RESULT_COLUMNS)
        w.writerows(result_rows)
    with open(paths.postop_keys, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "config_id"])
        w.writerows(keys)
    np.save(paths.postop_shapes, np.array(vectors))

    converged = len(keys)
    counts = {
        "patients": len(cohort_rows),
        "configs": len(all_entries),
        "converged": converged,
        "failed": len(all_entries) - converged,
    }
    _record_stage(paths, cfg, "simulate", counts, {
        "plan": paths.plan,
        "results": paths.results,
        "postop_shapes": paths.postop_shapes,
        "postop_keys": paths.postop_keys,
    })
    return counts


# -- stage: build-ssm ----------------------------------------------------------


def _select_and_truncate(model: ShapeModel, threshold: float,
                         forced: int) -> ShapeModel:
    available = model.k
    if forced > 0:
        k = min(forced, available)
    else:
        k = select_modes(model, threshold)
    return truncate_modes(model, k)


def run_build_ssm(cfg: PipelineConfig) -> dict:
    """Build the pre-op and post-op shape models."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.cohort_manifest, "cohort manifest", "synth-cohort")
    require_artifact(paths.postop_shapes, "post-op shape matrix", "simulate")

    cohort_rows = read_cohort_manifest(paths.cohort_manifest)
    preop = np.array([
        vectorize(_patient_head(row, cfg.cohort.resolution))
        for row in cohort_rows
    ])
    model_in = _select_and_truncate(build_shape_model(preop),
                                    cfg.ssm.input_threshold,
                                    cfg.ssm.modes_in)

    postop = np.load(paths.postop_shapes)
    if postop.ndim != 2 or len(postop) < 2:
        raise PipelineError("post-op shape matrix needs at least 2 rows")
    model_out = _select_and_truncate(build_shape_model(postop),
                                     cfg.ssm.output_threshold,
                                     cfg.ssm.modes_out)

    os.makedirs(os.path.dirname(paths.ssm_in), exist_ok=True)
    save_shape_model(model_in, paths.ssm_in)
    save_shape_model(model_out, paths.ssm_out)

    counts = {
        "input_samples": len(preop),
        "output_samples": len(postop),
        "k_in": model_in.k,
        "k_out": model_out.k,
    }
    _record_stage(paths, cfg, "build-ssm", counts, {
        "ssm_in": paths.ssm_in,
        "ssm_out": paths.ssm_out,
    })
    return counts


# -- stage: assemble -----------------------------------------------------------


def run_assemble(cfg: PipelineConfig) -> dict:
    """One dataset row per converged simulation."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.cohort_manifest, "cohort manifest", "synth-cohort")
    require_artifact(paths.plan, "design plan", "simulate")
    require_artifact(paths.postop_keys, "simulation outputs", "simulate")
    require_artifact(paths.ssm_in, "input shape model", "build-ssm")
    require_artifact(paths.ssm_out, "output shape model", "build-ssm")

    cohort_rows = {r["patient_id"]: r
                   for r in read_cohort_manifest(paths.cohort_manifest)}
    entries = {e.config_id: e for e in read_plan_csv(paths.plan,
                                                     param_space_of(cfg))}
    model_in = load_shape_model(paths.ssm_in)
    model_out = load_shape_model(paths.ssm_out)

    with open(paths.postop_keys, newline="") as fh:
        keys = list(csv.DictReader(fh))
    postop = np.load(paths.postop_shapes)
    if len(keys) != len(postop):
        raise PipelineError(
            f"post-op keys ({len(keys)}) and shapes ({len(postop)}) disagree")

    missing_cfg = sorted({k["config_id"] for k in keys}
                         - set(entries))
    if missing_cfg:
        raise PipelineError(
            f"simulation results reference configs absent from the plan: "
            f"{missing_cfg[:5]}")
    missing_pat = sorted({k["patient_id"] for k in keys}
                         - set(cohort_rows))
    if missing_pat:
        raise PipelineError(
            f"simulation results reference unknown patients: {missing_pat[:5]}")

    # one projection per patient covers every row of that patient
    b_in_by_patient = {}
    for pid in sorted({k["patient_id"] for k in keys}):
        head = _patient_head(cohort_rows[pid], cfg.cohort.resolution)
        b_in_by_patient[pid] = model_in.modes.T @ (vectorize(head)
                                                   - model_in.mean)

    b_out = (postop - model_out.mean) @ model_out.modes

    X, row_ids = [], []
    for i, key in enumerate(keys):
        pid, cid = key["patient_id"], key["config_id"]
        c = entries[cid].config
        X.append(np.concatenate([
            [cohort_rows[pid]["age_days"], c.a_ratio, c.ap_ratio, c.lat_ratio,
             c.front_spring.stiffness, c.front_spring.free_length,
             c.back_spring.stiffness, c.back_spring.free_length],
            b_in_by_patient[pid],
        ]))
        row_ids.append(cid)

    dataset = Dataset(np.array(X), b_out,
                      feature_names(model_in.k), target_names(model_out.k),
                      row_ids=tuple(row_ids))
    os.makedirs(os.path.dirname(paths.dataset), exist_ok=True)
    write_dataset_csv(dataset, paths.dataset)
    with open(paths.dataset_rows, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "patient_id", "config_id"])
        for i, key in enumerate(keys):
            w.writerow([i, key["patient_id"], key["config_id"]])

    counts = {"rows": dataset.n_rows,
              "columns": dataset.n_features + dataset.n_targets}
    _record_stage(paths, cfg, "assemble", counts, {
        "dataset": paths.dataset,
        "dataset_rows": paths.dataset_rows,
    })
    return counts


# -- stages: train / tune / evaluate ------------------------------------------


def _metrics_dict(m) -> dict:
    return {"r2": m.r2, "mse": m.mse, "mae": m.mae}


def _train_and_report(cfg: PipelineConfig, spec: RegressorSpec,
                      stage: str, extra_artifacts: dict = None,
                      extra_counts: dict = None) -> dict:
    paths = RunPaths(cfg.run_dir)
    dataset = read_dataset_csv(paths.dataset)
    train, test = split(dataset, cfg.ml.test_fraction, cfg.ml.seed)

    model = fit(spec, train, seed=cfg.ml.seed)
    model.metadata.update({
        "dataset_sha256": file_sha256(paths.dataset),
        "ssm_in_sha256": file_sha256(paths.ssm_in),
        "ssm_out_sha256": file_sha256(paths.ssm_out),
        "config_hash": config_digest(cfg),
    })
    test_metrics = evaluate(model, test)
    cv = kfold_cv(spec, train, k=cfg.ml.folds, seed=cfg.ml.seed)
    baseline = evaluate(fit(RegressorSpec("LINEAR", {}), train,
                            seed=cfg.ml.seed), test)

    os.makedirs(os.path.dirname(paths.model), exist_ok=True)
    save_model(model, paths.model)
    report = {
        "spec": {"kind": spec.kind, "hyperparameters": spec.hyperparameters},
        "n_train": train.n_rows,
        "n_test": test.n_rows,
        "test": _metrics_dict(test_metrics),
        "cv": {
            "folds": [_metrics_dict(m) for m in cv.folds],
            "mean": _metrics_dict(cv.mean),
            "sd_r2": cv.sd_r2,
        },
        "baseline_linear": _metrics_dict(baseline),
    }
    with open(paths.metrics, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    counts = {"n_train": train.n_rows, "n_test": test.n_rows,
              "test_r2": round(test_metrics.r2, 6),
              "cv_r2": round(cv.mean.r2, 6)}
    counts.update(extra_counts or {})
    artifacts = {"model": paths.model, "metrics": paths.metrics}
    artifacts.update(extra_artifacts or {})
    _record_stage(paths, cfg, stage, counts, artifacts)
    return counts


def run_train(cfg: PipelineConfig) -> dict:
    """Fit the configured model kind and report held-out metrics."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.dataset, "training dataset", "assemble")
    spec = RegressorSpec(cfg.ml.kind, cfg.ml.hyperparameters)
    return _train_and_report(cfg, spec, "train")


def run_tune(cfg: PipelineConfig) -> dict:
    """Search hyperparameters on the training split, then refit and save."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.dataset, "training dataset", "assemble")
    dataset = read_dataset_csv(paths.dataset)
    train, _ = split(dataset, cfg.ml.test_fraction, cfg.ml.seed)

    space = default_space(cfg.ml.kind)
    result = tune(space, train, budget=cfg.ml.tuner_budget, seed=cfg.ml.seed,
                  k=cfg.ml.folds)
    with open(paths.tune_trace, "w") as fh:
        json.dump({
            "best_score": result.best_score,
            "best_hyperparameters": result.best_spec.hyperparameters,
            "trials": [{"hyperparameters": t.hyperparameters,
                        "score": t.score} for t in result.trials],
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return _train_and_report(
        cfg, result.best_spec, "tune",
        extra_artifacts={"tune_trace": paths.tune_trace},
        extra_counts={"trials": len(result.trials),
                      "best_cv_r2": round(result.best_score, 6)})


def run_evaluate(cfg: PipelineConfig) -> dict:
    """Recompute held-out metrics for the saved model from its artifacts."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.dataset, "training dataset", "assemble")
    require_artifact(paths.model, "trained model", "train")
    model = load_model(paths.model)

    dataset_hash = file_sha256(paths.dataset)
    stored = model.metadata.get("dataset_sha256")
    if stored != dataset_hash:
        raise PipelineError(
            "model was trained on a different dataset\n"
            f"  model expects: {stored}\n"
            f"  dataset is:    {dataset_hash}")

    dataset = read_dataset_csv(paths.dataset)
    train, test = split(dataset, cfg.ml.test_fraction, cfg.ml.seed)
    test_metrics = evaluate(model, test)
    cv = kfold_cv(model.spec, train, k=cfg.ml.folds, seed=cfg.ml.seed)

    counts = {
        "n_test": test.n_rows,
        "test_r2": round(test_metrics.r2, 6),
        "test_mse": round(test_metrics.mse, 6),
        "test_mae": round(test_metrics.mae, 6),
        "cv_r2": round(cv.mean.r2, 6),
        "cv_gap": round(abs(cv.mean.r2 - test_metrics.r2), 6),
    }
    _record_stage(paths, cfg, "evaluate", counts, {"model": paths.model})
    return counts


# -- stage: predict ------------------------------------------------------------


def request_bounds(cfg: PipelineConfig) -> dict:
    """Parameter bounds the prediction inputs are validated against."""
    space = param_space_of(cfg)
    ks = [s.stiffness for s in space.spring_catalog]
    letters = [s.free_length for s in space.spring_catalog]
    return {
        "age_days": [120.0, 240.0],
        "A": list(space.a_range),
        "AP": list(space.ap_range),
        "LAT": list(space.lat_range),
        "spring_k": [min(ks), max(ks)],
        "spring_L0": [min(letters), max(letters)],
    }


_REQUIRED_KEYS = ("age_days", "A", "AP", "LAT", "front_spring",
                  "back_spring", "b_in")


def validate_request(cfg: PipelineConfig, req: dict) -> list:
    """Range violations for a prediction request, each citing its bound."""
    missing = [k for k in _REQUIRED_KEYS if k not in req]
    for side in ("front_spring", "back_spring"):
        if isinstance(req.get(side), dict):
            missing.extend(f"{side}.{k}" for k in ("k", "L0")
                           if k not in req[side])
        elif side in req:
            missing.append(f"{side}.k")
    if missing:
        return [f"missing field {name}" for name in missing]
    bounds = request_bounds(cfg)
    checks = [
        ("age_days", req["age_days"], bounds["age_days"]),
        ("A", req["A"], bounds["A"]),
        ("AP", req["AP"], bounds["AP"]),
        ("LAT", req["LAT"], bounds["LAT"]),
        ("front_spring.k", req["front_spring"]["k"], bounds["spring_k"]),
        ("front_spring.L0", req["front_spring"]["L0"], bounds["spring_L0"]),
        ("back_spring.k", req["back_spring"]["k"], bounds["spring_k"]),
        ("back_spring.L0", req["back_spring"]["L0"], bounds["spring_L0"]),
    ]
    problems = []
    for name, value, (lo, hi) in checks:
        if not np.isfinite(value):
            problems.append(f"{name}={value} is not finite")
        elif not (lo <= value <= hi):
            problems.append(f"{name}={value:g} outside [{lo:g}, {hi:g}]")
    if not problems and req["A"] >= req["AP"]:
        problems.append(
            f"A={req['A']:g} must be strictly below AP={req['AP']:g}")
    return problems


def request_features(req: dict, k_in: int) -> np.ndarray:
    b_in = np.asarray(req["b_in"], dtype=np.float64)
    if b_in.shape != (k_in,):
        raise PipelineError(
            f"b_in has {b_in.shape[0] if b_in.ndim == 1 else 'bad'} "
            f"coefficients, model expects {k_in}")
    return np.concatenate([
        [req["age_days"], req["A"], req["AP"], req["LAT"],
         req["front_spring"]["k"], req["front_spring"]["L0"],
         req["back_spring"]["k"], req["back_spring"]["L0"]],
        b_in,
    ])


def verify_ssm_hashes(model: SurrogateModel, paths: RunPaths):
    for name, path in (("ssm_in", paths.ssm_in), ("ssm_out", paths.ssm_out)):
        stored = model.metadata.get(f"{name}_sha256")
        actual = file_sha256(path)
        if stored != actual:
            raise PipelineError(
                f"model and {name} shape model do not match\n"
                f"  model expects: {stored}\n"
                f"  file is:       {actual}")


def run_predict(cfg: PipelineConfig, request: dict,
                mesh_out=None) -> dict:
    """Single prediction from artifacts; optionally writes the mesh."""
    paths = RunPaths(cfg.run_dir)
    require_artifact(paths.model, "trained model", "train")
    require_artifact(paths.ssm_in, "input shape model", "build-ssm")
    require_artifact(paths.ssm_out, "output shape model", "build-ssm")
    require_artifact(paths.template, "mesh template", "synth-cohort")

    model = load_model(paths.model)
    verify_ssm_hashes(model, paths)
    problems = validate_request(cfg, request)
    if problems:
        raise PipelineError("invalid request: " + "; ".join(problems))

    k_in = len(model.feature_names) - 8
    x = request_features(request, k_in)
    b_out = model.predict(x[None, :])[0]

    model_out = load_shape_model(paths.ssm_out)
    template = load_stl(paths.template)
    mesh = devectorize(reconstruct(model_out, b_out), template)
    ci_pred = compute_cephalic_index(mesh)
    if mesh_out:
        save_stl(mesh, mesh_out)
    return {"b_out": [float(v) for v in b_out], "ci_pred": float(ci_pred)}


STAGES = ("synth-cohort", "simulate", "build-ssm", "assemble", "train",
          "tune", "evaluate")
