from __future__ import annotations

import csv
import dataclasses
import json
import os
import shutil
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.spatial import cKDTree

from cranioplan import pipeline as pl
from cranioplan.cli import main as cli_main
from cranioplan.cohort import read_cohort_manifest
from cranioplan.design import read_plan_csv
from cranioplan.learn import load_model, read_dataset_csv
from cranioplan.shape_model import load_shape_model, project
from cranioplan.stl import load_stl

# -- configuration ------------------------------------------------------------


MINI_TOML = """\
run_dir = "{run_dir}"

[cohort]
n_patients = 8
seed = 11
resolution = 24

[doe]
n_configs = 8
seed = 5
candidates = 5

[ml]
test_fraction = 0.33
folds = 3
tuner_budget = 12
"""


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(MINI_TOML.format(run_dir=tmp_path / "r"))
    cfg = pl.load_config(path)
    assert cfg.cohort.n_patients == 8
    assert cfg.doe.n_configs == 8
    assert cfg.ml.tuner_budget == 12
    assert cfg.sim.tol == 1e-2  # untouched section keeps defaults


def test_load_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('run_dir = "r"\n[cohort]\nn_patientss = 8\n')
    with pytest.raises(pl.PipelineError, match="n_patientss"):
        pl.load_config(path)


def test_load_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('run_dir = "r"\n[cohorts]\nn_patients = 8\n')
    with pytest.raises(pl.PipelineError, match="cohorts"):
        pl.load_config(path)


def test_load_config_requires_run_dir(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("[cohort]\nn_patients = 8\n")
    with pytest.raises(pl.PipelineError, match="run_dir"):
        pl.load_config(path)


def test_load_config_rejects_bad_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("run_dir = \n")
    with pytest.raises(pl.PipelineError, match="TOML"):
        pl.load_config(path)


def test_config_digest_ignores_run_dir_but_not_seeds():
    a = pl.default_config("/tmp/a")
    b = pl.default_config("/tmp/b")
    assert pl.config_digest(a) == pl.config_digest(b)
    c = dataclasses.replace(a, cohort=dataclasses.replace(a.cohort, seed=99))
    assert pl.config_digest(a) != pl.config_digest(c)


def test_config_validates_thresholds():
    with pytest.raises(pl.PipelineError, match="threshold"):
        pl.PipelineConfig(run_dir="r", ssm=pl.SsmSettings(input_threshold=1.5))
    with pytest.raises(pl.PipelineError, match="test_fraction"):
        pl.PipelineConfig(run_dir="r", ml=pl.MlSettings(test_fraction=0.0))


# -- stage ordering ------------------------------------------------------------


def test_missing_upstream_stage_is_named(tmp_path):
    cfg = pl.default_config(str(tmp_path / "empty"))
    with pytest.raises(pl.PipelineError, match="synth-cohort"):
        pl.run_simulate(cfg)
    with pytest.raises(pl.PipelineError, match="synth-cohort"):
        pl.run_assemble(cfg)
    with pytest.raises(pl.PipelineError, match="assemble"):
        pl.run_train(cfg)
    with pytest.raises(pl.PipelineError, match="assemble"):
        pl.run_evaluate(cfg)
    req = {"age_days": 150}
    with pytest.raises(pl.PipelineError, match="train"):
        pl.run_predict(cfg, req)


def test_build_ssm_requires_simulation(tmp_path):
    cfg = dataclasses.replace(
        pl.default_config(str(tmp_path / "partial")),
        cohort=pl.CohortSettings(n_patients=2, seed=1, resolution=24))
    pl.run_synth_cohort(cfg)
    with pytest.raises(pl.PipelineError, match="simulate"):
        pl.run_build_ssm(cfg)


def test_mismatched_config_refuses_to_touch_run(tmp_path, mini_run):
    other = dataclasses.replace(
        mini_run, cohort=dataclasses.replace(mini_run.cohort, seed=12345))
    with pytest.raises(pl.PipelineError, match="different configuration"):
        pl.run_evaluate(other)


# -- artifacts of a completed run ----------------------------------------------


def test_manifest_records_all_stages_and_counts(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    manifest = pl.load_manifest(paths)
    assert set(manifest["stages"]) == {
        "synth-cohort", "simulate", "build-ssm", "assemble", "train",
        "evaluate"}
    sim = manifest["stages"]["simulate"]["counts"]
    rows = manifest["stages"]["assemble"]["counts"]["rows"]
    assert rows == sim["converged"]
    assert rows <= sim["configs"]  # non-converged runs are excluded
    assert sim["converged"] + sim["failed"] == sim["configs"]
    ssm = manifest["stages"]["build-ssm"]["counts"]
    cols = manifest["stages"]["assemble"]["counts"]["columns"]
    assert cols == 8 + ssm["k_in"] + ssm["k_out"]


def test_manifest_hashes_match_artifact_bytes(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    manifest = pl.load_manifest(paths)
    for stage in manifest["stages"].values():
        for art in stage["artifacts"].values():
            full = os.path.join(mini_run.run_dir, art["path"])
            assert pl.file_sha256(full) == art["sha256"]


def test_dataset_row_count_equals_converged_sims(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    with open(paths.results, newline="") as fh:
        results = list(csv.DictReader(fh))
    converged = [r for r in results if r["converged"] == "1"]
    dataset = read_dataset_csv(paths.dataset)
    assert dataset.n_rows == len(converged)
    with open(paths.dataset_rows, newline="") as fh:
        sidecar = list(csv.DictReader(fh))
    assert [r["config_id"] for r in sidecar] == [
        r["config_id"] for r in converged]


def test_b_in_matches_reprojection_of_stored_mesh(mini_run):
    """Dataset b_in columns must reproduce from the STL files on disk.

    Loading an STL rebuilds the vertex set in sorted weld order, so the
    loaded head is matched back to the regenerated template ordering by
    nearest neighbour before projecting.
    """
    paths = pl.RunPaths(mini_run.run_dir)
    dataset = read_dataset_csv(paths.dataset)
    model_in = load_shape_model(paths.ssm_in)
    rows = read_cohort_manifest(paths.cohort_manifest)
    k_in = model_in.k

    for row in rows[:3]:
        stored = load_stl(os.path.join(mini_run.run_dir, row["mesh_path"]))
        reference = pl._patient_head(row, mini_run.cohort.resolution)
        dist, nearest = cKDTree(stored.vertices).query(reference.vertices)
        assert dist.max() < 1e-3  # float32 quantization only
        aligned = stored.vertices[nearest]
        b_in = project(model_in, aligned.reshape(-1))

        mask = [rid.startswith(row["patient_id"] + "-")
                for rid in _row_ids(paths)]
        got = dataset.X[mask][:, 8:8 + k_in]
        assert np.allclose(got, b_in[None, :], atol=1e-3)


def test_b_out_matches_projection_of_saved_shapes(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    dataset = read_dataset_csv(paths.dataset)
    model_out = load_shape_model(paths.ssm_out)
    shapes = np.load(paths.postop_shapes)
    expected = np.array([project(model_out, s) for s in shapes])
    assert np.allclose(dataset.Y, expected, atol=1e-9)


def test_age_and_config_columns_match_plan(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    dataset = read_dataset_csv(paths.dataset)
    entries = {e.config_id: e
               for e in read_plan_csv(paths.plan, pl.param_space_of(mini_run))}
    ages = {r["patient_id"]: r["age_days"]
            for r in read_cohort_manifest(paths.cohort_manifest)}
    for i, rid in enumerate(_row_ids(paths)):
        e = entries[rid]
        x = dataset.X[i]
        assert x[0] == ages[e.patient_id]
        assert (x[1], x[2], x[3]) == (e.config.a_ratio, e.config.ap_ratio,
                                      e.config.lat_ratio)
        assert (x[4], x[5]) == (e.config.front_spring.stiffness,
                                e.config.front_spring.free_length)
        assert (x[6], x[7]) == (e.config.back_spring.stiffness,
                                e.config.back_spring.free_length)


def test_model_metadata_pins_artifact_hashes(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    model = load_model(paths.model)
    assert model.metadata["dataset_sha256"] == pl.file_sha256(paths.dataset)
    assert model.metadata["ssm_in_sha256"] == pl.file_sha256(paths.ssm_in)
    assert model.metadata["ssm_out_sha256"] == pl.file_sha256(paths.ssm_out)
    assert model.metadata["config_hash"] == pl.config_digest(mini_run)


def test_metrics_report_structure(mini_run):
    paths = pl.RunPaths(mini_run.run_dir)
    with open(paths.metrics) as fh:
        report = json.load(fh)
    assert report["spec"]["kind"] == "SVR"
    assert set(report["test"]) == {"r2", "mse", "mae"}
    assert len(report["cv"]["folds"]) == mini_run.ml.folds
    assert set(report["baseline_linear"]) == {"r2", "mse", "mae"}
    assert report["n_train"] + report["n_test"] == read_dataset_csv(
        paths.dataset).n_rows


# -- prediction from artifacts ---------------------------------------------------


def _row_ids(paths):
    with open(paths.dataset_rows, newline="") as fh:
        return [r["config_id"] for r in csv.DictReader(fh)]


def _request_from_dataset_row(dataset, i):
    x = dataset.X[i]
    return {
        "age_days": x[0], "A": x[1], "AP": x[2], "LAT": x[3],
        "front_spring": {"k": x[4], "L0": x[5]},
        "back_spring": {"k": x[6], "L0": x[7]},
        "b_in": [float(v) for v in x[8:]],
    }


def test_predict_round_trip(mini_run, tmp_path):
    paths = pl.RunPaths(mini_run.run_dir)
    dataset = read_dataset_csv(paths.dataset)
    req = _request_from_dataset_row(dataset, 0)
    mesh_path = tmp_path / "pred.stl"
    out = pl.run_predict(mini_run, req, mesh_out=str(mesh_path))
    assert len(out["b_out"]) == dataset.n_targets
    assert np.isfinite(out["b_out"]).all()
    assert 50.0 < out["ci_pred"] < 110.0
    assert load_stl(mesh_path).vertices.shape[1] == 3


def test_predict_rejects_out_of_range(mini_run):
    dataset = read_dataset_csv(pl.RunPaths(mini_run.run_dir).dataset)
    req = _request_from_dataset_row(dataset, 0)
    with pytest.raises(pl.PipelineError, match=r"A=0.35 outside \[0.18, 0.3\]"):
        pl.run_predict(mini_run, dict(req, A=0.35))


def test_predict_rejects_mismatched_ssm_hash(mini_run, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(mini_run.run_dir, broken)
    cfg = dataclasses.replace(mini_run, run_dir=str(broken))
    paths = pl.RunPaths(cfg.run_dir)
    shutil.copyfile(paths.ssm_out, paths.ssm_in)

    dataset = read_dataset_csv(paths.dataset)
    req = _request_from_dataset_row(dataset, 0)
    model = load_model(paths.model)
    with pytest.raises(pl.PipelineError) as err:
        pl.run_predict(cfg, req)
    message = str(err.value)
    assert model.metadata["ssm_in_sha256"] in message
    assert pl.file_sha256(paths.ssm_in) in message


def test_request_validation_messages(mini_run):
    bounds = pl.request_bounds(mini_run)
    assert bounds == {
        "age_days": [120.0, 240.0],
        "A": [0.18, 0.30],
        "AP": [0.47, 0.63],
        "LAT": [0.10, 0.25],
        "spring_k": [0.4, 1.2],
        "spring_L0": [55.0, 65.0],
    }
    ok = {"age_days": 150, "A": 0.25, "AP": 0.55, "LAT": 0.18,
          "front_spring": {"k": 0.8, "L0": 60},
          "back_spring": {"k": 0.8, "L0": 60},
          "b_in": [0.0]}
    assert pl.validate_request(mini_run, ok) == []
    msgs = pl.validate_request(mini_run, dict(ok, LAT=0.3))
    assert msgs == ["LAT=0.3 outside [0.1, 0.25]"]
    # the ordering rule can only fire when the configured ranges overlap
    wide = dataclasses.replace(
        mini_run, doe=dataclasses.replace(mini_run.doe, a_range=(0.18, 0.55)))
    msgs = pl.validate_request(wide, dict(ok, A=0.50, AP=0.48))
    assert "strictly below" in msgs[0]
    msgs = pl.validate_request(mini_run, {"age_days": 150})
    assert any("missing field A" == m for m in msgs)
    msgs = pl.validate_request(
        mini_run, dict(ok, front_spring={"k": 0.8}))
    assert msgs == ["missing field front_spring.L0"]
    msgs = pl.validate_request(mini_run, dict(ok, age_days=float("nan")))
    assert "not finite" in msgs[0]


# -- assemble error paths ---------------------------------------------------------


def _copy_run(mini_run, tmp_path, name):
    target = tmp_path / name
    shutil.copytree(mini_run.run_dir, target)
    return dataclasses.replace(mini_run, run_dir=str(target))


def _doctor_keys(run_dir, column, value):
    paths = pl.RunPaths(run_dir)
    with open(paths.postop_keys, newline="") as fh:
        rows = list(csv.reader(fh))
    rows[1][{"patient_id": 0, "config_id": 1}[column]] = value
    with open(paths.postop_keys, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def test_assemble_names_unmatched_config(mini_run, tmp_path):
    cfg = _copy_run(mini_run, tmp_path, "bad_config")
    _doctor_keys(cfg.run_dir, "config_id", "p000-c999")
    with pytest.raises(pl.PipelineError, match="p000-c999"):
        pl.run_assemble(cfg)


def test_assemble_names_unmatched_patient(mini_run, tmp_path):
    cfg = _copy_run(mini_run, tmp_path, "bad_patient")
    _doctor_keys(cfg.run_dir, "patient_id", "p999")
    with pytest.raises(pl.PipelineError, match="p999"):
        pl.run_assemble(cfg)


# -- the command line ---------------------------------------------------------------


STAGE_SEQUENCE = ["synth-cohort", "simulate", "build-ssm", "assemble",
                  "train", "tune", "evaluate"]


def test_cli_full_run_on_mini_cohort(tmp_path):
    """Whole pipeline through the CLI in one run directory, under 3 min."""
    run_dir = tmp_path / "run"
    config = tmp_path / "run.toml"
    config.write_text(MINI_TOML.format(run_dir=run_dir))
    runner = CliRunner()

    started = time.time()
    for stage in STAGE_SEQUENCE:
        result = runner.invoke(cli_main, [stage, "-c", str(config)])
        assert result.exit_code == 0, f"{stage}: {result.output}"
        echoed = json.loads(result.stdout.strip().splitlines()[-1])
        assert echoed["stage"] == stage
    elapsed = time.time() - started
    assert elapsed < 180.0, f"mini run took {elapsed:.0f}s"

    manifest = pl.load_manifest(pl.RunPaths(str(run_dir)))
    assert set(manifest["stages"]) == set(STAGE_SEQUENCE)

    # a rerun of the data-producing stages reproduces the dataset bytes
    cfg = pl.load_config(config)
    paths = pl.RunPaths(cfg.run_dir)
    before_dataset = pl.file_sha256(paths.dataset)
    before_shapes = pl.file_sha256(paths.postop_shapes)
    for stage in ("simulate", "assemble"):
        result = runner.invoke(cli_main, [stage, "-c", str(config)])
        assert result.exit_code == 0
    assert pl.file_sha256(paths.dataset) == before_dataset
    assert pl.file_sha256(paths.postop_shapes) == before_shapes

    # predict through the CLI from a dataset row
    dataset = read_dataset_csv(paths.dataset)
    request = tmp_path / "request.json"
    request.write_text(json.dumps(_request_from_dataset_row(dataset, 0)))
    mesh_out = tmp_path / "predicted.stl"
    result = runner.invoke(cli_main, [
        "predict", "-c", str(config), "-r", str(request),
        "--mesh-out", str(mesh_out)])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert len(payload["b_out"]) == dataset.n_targets
    assert mesh_out.exists()

    # hash integrity: a swapped shape model is refused with both digests
    shutil.copyfile(paths.ssm_out, paths.ssm_in)
    result = runner.invoke(cli_main, [
        "predict", "-c", str(config), "-r", str(request)])
    assert result.exit_code == 1
    error = json.loads(result.stderr.strip())
    assert "model expects" in error["error"] and "file is" in error["error"]


def test_cli_errors_are_json_on_stderr(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli_main, ["assemble", "--run-dir",
                                      str(tmp_path / "void")])
    assert result.exit_code == 1
    error = json.loads(result.stderr.strip())
    assert error["stage"] == "assemble"
    assert "synth-cohort" in error["error"]


def test_cli_requires_config_or_run_dir():
    runner = CliRunner()
    result = runner.invoke(cli_main, ["train"])
    assert result.exit_code == 1
    assert "--config" in json.loads(result.stderr.strip())["error"]


def test_cli_seed_override_changes_run_identity(tmp_path):
    runner = CliRunner()
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(cli_main, [
        "synth-cohort", "--run-dir", str(a)]).exit_code == 0
    assert runner.invoke(cli_main, [
        "synth-cohort", "--run-dir", str(b), "--seed", "123"]).exit_code == 0
    ida = pl.load_manifest(pl.RunPaths(str(a)))["run_id"]
    idb = pl.load_manifest(pl.RunPaths(str(b)))["run_id"]
    assert ida != idb
