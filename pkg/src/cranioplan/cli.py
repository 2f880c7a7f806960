"""Command line entry point wrapping the staged pipeline.

Every stage command takes either a TOML config file or a run directory
(defaults apply), prints the stage counts as JSON on success, and exits
nonzero with a JSON error object on stderr when something is wrong.
"""
from __future__ import annotations

import dataclasses
import json
import sys

import click

from . import pipeline as pl

# every domain error in the package subclasses ValueError; PipelineError
# is a RuntimeError; OSError covers unreadable/unwritable artifact paths
_EXPECTED = (pl.PipelineError, ValueError, OSError)


def _fail(stage: str, exc: Exception):
    payload = {"error": str(exc), "kind": type(exc).__name__, "stage": stage}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def _load(config, run_dir, seed) -> pl.PipelineConfig:
    if config is None and run_dir is None:
        raise pl.PipelineError("pass --config FILE or --run-dir DIR")
    cfg = pl.load_config(config) if config else pl.default_config(run_dir)
    if run_dir is not None:
        cfg = dataclasses.replace(cfg, run_dir=run_dir)
    if seed is not None:
        # one flag reseeds every stage; offsets keep the streams apart
        cfg = dataclasses.replace(
            cfg,
            cohort=dataclasses.replace(cfg.cohort, seed=seed),
            doe=dataclasses.replace(cfg.doe, seed=seed + 1),
            ml=dataclasses.replace(cfg.ml, seed=seed + 2),
        )
    return cfg


def _stage_command(name: str, runner):
    @main.command(name=name, help=runner.__doc__)
    @click.option("--config", "-c", type=click.Path(), default=None,
                  help="TOML pipeline configuration.")
    @click.option("--run-dir", type=click.Path(), default=None,
                  help="Run directory (defaults for everything else).")
    @click.option("--seed", type=int, default=None,
                  help="Override the configured seeds.")
    def command(config, run_dir, seed):
        try:
            cfg = _load(config, run_dir, seed)
            counts = runner(cfg)
        except _EXPECTED as exc:
            _fail(name, exc)
        click.echo(json.dumps({"stage": name, "counts": counts}))

    return command


@click.group()
@click.version_option(package_name="cranioplan")
def main():
    """Cranioplasty planning pipeline: synthetic cohorts, simulated
    spring surgeries, shape models, and a trained outcome predictor."""


for _name, _runner in [
    ("synth-cohort", pl.run_synth_cohort),
    ("simulate", pl.run_simulate),
    ("build-ssm", pl.run_build_ssm),
    ("assemble", pl.run_assemble),
    ("train", pl.run_train),
    ("tune", pl.run_tune),
    ("evaluate", pl.run_evaluate),
]:
    _stage_command(_name, _runner)


@main.command()
@click.option("--config", "-c", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--request", "-r", type=click.Path(), required=True,
              help="JSON file with the prediction request ('-' for stdin).")
@click.option("--mesh-out", type=click.Path(), default=None,
              help="Also write the predicted surface as binary STL.")
def predict(config, run_dir, request, mesh_out):
    """Predict the post-op shape coefficients for one configuration."""
    try:
        cfg = _load(config, run_dir, None)
        if request == "-":
            req = json.load(sys.stdin)
        else:
            with open(request) as fh:
                req = json.load(fh)
        result = pl.run_predict(cfg, req, mesh_out=mesh_out)
    except json.JSONDecodeError as exc:
        _fail("predict", pl.PipelineError(f"request is not valid JSON: {exc}"))
    except _EXPECTED as exc:
        _fail("predict", exc)
    click.echo(json.dumps(result))


@main.command()
@click.option("--config", "-c", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(config, run_dir, host, port):
    """Serve predictions over HTTP from a completed run's artifacts."""
    try:
        cfg = _load(config, run_dir, None)
        import uvicorn

        from .service import create_app
        app = create_app(cfg)
    except _EXPECTED as exc:
        _fail("serve", exc)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
