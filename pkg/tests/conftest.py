from __future__ import annotations

import numpy as np
import pytest

from cranioplan.mesh import (
    PlaneSpec,
    TriMesh,
    cut_with_plane,
    icosphere,
    label_regions,
    transform_mesh,
    uv_sphere,
)


@pytest.fixture(scope="session")
def sphere50() -> TriMesh:
    return icosphere(subdivisions=3, radius=50.0)


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """A complete small pipeline run shared by read-only tests."""
    from cranioplan import pipeline as pl

    run_dir = tmp_path_factory.mktemp("mini_run")
    cfg = pl.PipelineConfig(
        run_dir=str(run_dir),
        cohort=pl.CohortSettings(n_patients=6, seed=11, resolution=24),
        doe=pl.DoeSettings(n_configs=8, seed=5, candidates=5),
        ml=pl.MlSettings(test_fraction=0.33, folds=3, seed=0),
    )
    pl.run_synth_cohort(cfg)
    pl.run_simulate(cfg)
    pl.run_build_ssm(cfg)
    pl.run_assemble(cfg)
    pl.run_train(cfg)
    pl.run_evaluate(cfg)
    return cfg


@pytest.fixture(scope="session")
def labeled_dome() -> TriMesh:
    """Elongated skull-like dome with suture bands, cut at a base plane."""
    ball = uv_sphere(n_theta=40, n_phi=80, radius=70.0)
    ball = transform_mesh(ball, rotation=np.diag([0.95, 1.30, 0.90]))
    dome = cut_with_plane(ball, PlaneSpec.from_point_normal((0, 0, -22.0), (0, 0, 1)))
    return label_regions(dome, coronal_frac=0.20, lambdoid_frac=0.86, suture_width_mm=2.0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
