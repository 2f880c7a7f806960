from __future__ import annotations

import concurrent.futures
import json
import struct
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from cranioplan import pipeline as pl
from cranioplan.service import create_app
from cranioplan.stl import load_stl


@pytest.fixture(scope="module")
def client(mini_run):
    return TestClient(create_app(mini_run))


@pytest.fixture(scope="module")
def info(client):
    return client.get("/model/info").json()


def _request(info, **overrides):
    req = {
        "age_days": 150.0, "A": 0.25, "AP": 0.55, "LAT": 0.18,
        "front_spring": {"k": 0.8, "L0": 60.0},
        "back_spring": {"k": 0.8, "L0": 60.0},
        "b_in": [0.0] * info["k_in"],
    }
    req.update(overrides)
    return req


def test_health_reports_ready(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "ready": True}


def test_model_info_contents(client, info, mini_run):
    assert info["k_in"] >= 1 and info["k_out"] >= 1
    assert info["bounds"] == pl.request_bounds(mini_run)
    assert [s["id"] for s in info["springs"]] == ["soft", "standard", "stiff"]
    assert set(info["metrics"]["test"]) == {"r2", "mse", "mae"}
    assert all(info["hashes"][k] for k in ("model", "dataset", "ssm_in",
                                           "ssm_out"))
    assert info["vertex_count"] > 100


def test_predict_mean_shape(client, info):
    r = client.post("/predict", json=_request(info))
    assert r.status_code == 200
    body = r.json()
    assert len(body["b_out"]) == info["k_out"]
    assert np.isfinite(body["b_out"]).all()
    assert body["mesh_url"].startswith("/mesh/")
    assert 50.0 < body["ci_pred"] < 110.0


def test_predict_latency_under_100ms(client, info):
    req = _request(info)
    client.post("/predict", json=req)  # warm
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        assert client.post("/predict", json=req).status_code == 200
        times.append(time.perf_counter() - t0)
    assert sorted(times)[len(times) // 2] < 0.1


def test_out_of_range_returns_400_citing_bound(client, info):
    r = client.post("/predict", json=_request(info, A=0.35))
    assert r.status_code == 400
    assert "0.3" in r.json()["detail"]
    assert "A=0.35" in r.json()["detail"]

    r = client.post("/predict", json=_request(info, age_days=60))
    assert r.status_code == 400
    assert "120" in r.json()["detail"]

    spring = {"k": 2.0, "L0": 60.0}
    r = client.post("/predict", json=_request(info, front_spring=spring))
    assert r.status_code == 400
    assert "front_spring.k" in r.json()["detail"]


def test_dimension_mismatch_returns_422(client, info):
    r = client.post("/predict",
                    json=_request(info, b_in=[0.0] * (info["k_in"] + 2)))
    assert r.status_code == 422
    assert f"expects {info['k_in']}" in r.json()["detail"]


def test_schema_violations_return_400(client, info):
    missing = _request(info)
    del missing["AP"]
    assert client.post("/predict", json=missing).status_code == 400

    assert client.post(
        "/predict", json=_request(info, A="wide")).status_code == 400

    extra = _request(info)
    extra["bogus"] = 1
    r = client.post("/predict", json=extra)
    assert r.status_code == 400
    assert r.json()["detail"] == "request does not match the schema"


def test_mesh_content_negotiation(client, info, tmp_path):
    body = client.post("/predict", json=_request(info)).json()

    stl = client.get(body["mesh_url"])
    assert stl.status_code == 200
    assert stl.headers["content-type"].startswith("model/stl")
    (count,) = struct.unpack_from("<I", stl.content, 80)
    assert len(stl.content) == 84 + 50 * count
    path = tmp_path / "served.stl"
    path.write_bytes(stl.content)
    assert len(load_stl(path).triangles) == count

    glb = client.get(body["mesh_url"],
                     headers={"Accept": "model/gltf-binary"})
    assert glb.status_code == 200
    assert glb.headers["content-type"] == "model/gltf-binary"
    assert glb.content[:4] == b"glTF"
    json_len, = struct.unpack_from("<I", glb.content, 12)
    doc = json.loads(glb.content[20:20 + json_len])
    assert doc["accessors"][0]["count"] == info["vertex_count"]
    assert doc["accessors"][1]["count"] == 3 * count


def test_unknown_mesh_id_is_404(client):
    r = client.get("/mesh/0000000000000000")
    assert r.status_code == 404


def test_concurrent_identical_requests_identical_bodies(client, info):
    req = _request(info, A=0.22)
    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        bodies = list(pool.map(
            lambda _: client.post("/predict", json=req).content, range(24)))
    assert len(set(bodies)) == 1
    assert json.loads(bodies[0])["mesh_url"].startswith("/mesh/")


def test_identical_requests_share_mesh_url(client, info):
    req = _request(info, LAT=0.2)
    a = client.post("/predict", json=req).json()["mesh_url"]
    b = client.post("/predict", json=req).json()["mesh_url"]
    assert a == b
    other = client.post(
        "/predict", json=_request(info, LAT=0.21)).json()["mesh_url"]
    assert other != a


def test_endpoints_return_503_before_artifacts(tmp_path):
    app = create_app(pl.default_config(str(tmp_path / "void")))
    client = TestClient(app)
    health = client.get("/health").json()
    assert health == {"status": "ok", "ready": False}
    assert client.get("/model/info").status_code == 503
    assert client.get("/mesh/abc").status_code == 503
    r = client.post("/predict", json={})
    # schema checks never mask unavailability
    assert r.status_code in (400, 503)
    r = client.post("/predict", json=_request({"k_in": 1}))
    assert r.status_code == 503
    assert "synth-cohort" in r.json()["detail"] or "train" in r.json()["detail"]


def test_artifact_reload_swaps_in_new_bundle(mini_run, tmp_path):
    cfg = pl.default_config(str(tmp_path / "late"))
    app = create_app(cfg)
    client = TestClient(app)
    assert client.get("/model/info").status_code == 503

    # artifacts appear after the app started; a reload picks them up
    import shutil
    shutil.rmtree(tmp_path / "late", ignore_errors=True)
    shutil.copytree(mini_run.run_dir, tmp_path / "late")
    assert app.state.reload_artifacts()
    assert client.get("/health").json()["ready"] is True
    assert client.get("/model/info").status_code == 200
