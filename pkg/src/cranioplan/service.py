"""HTTP prediction service over a completed run's artifacts.

The app serves a fixed, immutable artifact bundle (model, output shape
model, mesh template). Endpoints answer from memory; a reload builds a
fresh bundle and swaps it in atomically. Requests are validated twice:
schema by the framework (violations map to 400), parameter ranges by
the pipeline's bounds (400 citing the bound), and the shape coefficient
count by the model (422).
"""
from __future__ import annotations

import hashlib
import json
import threading
from collections import OrderedDict

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .gltf import mesh_to_glb
from .mesh import compute_cephalic_index
from .learn import load_model
from .pipeline import (PipelineConfig, RunPaths, file_sha256,
                       param_space_of, request_bounds, request_features,
                       require_artifact, validate_request,
                       verify_ssm_hashes)
from .shape_model import devectorize, load_shape_model, reconstruct
from .stl import load_stl, stl_bytes

__all__ = ["create_app"]

_MESH_CACHE_SIZE = 256


class SpringIn(BaseModel):
    model_config = ConfigDict(extra="forbid")
    k: float
    L0: float


class PredictIn(BaseModel):
    model_config = ConfigDict(extra="forbid")
    age_days: float
    A: float
    AP: float
    LAT: float
    front_spring: SpringIn
    back_spring: SpringIn
    b_in: list[float]


class _Artifacts:
    """Everything the endpoints read, loaded once and never mutated."""

    def __init__(self, cfg: PipelineConfig):
        paths = RunPaths(cfg.run_dir)
        require_artifact(paths.model, "trained model", "train")
        require_artifact(paths.metrics, "model metrics", "train")
        require_artifact(paths.ssm_out, "output shape model", "build-ssm")
        require_artifact(paths.template, "mesh template", "synth-cohort")

        self.model = load_model(paths.model)
        verify_ssm_hashes(self.model, paths)
        self.model_out = load_shape_model(paths.ssm_out)
        self.template = load_stl(paths.template)
        with open(paths.metrics) as fh:
            self.metrics = json.load(fh)

        self.k_in = len(self.model.feature_names) - 8
        self.k_out = len(self.model.target_names)
        self.hashes = {
            "model": file_sha256(paths.model),
            "dataset": self.model.metadata.get("dataset_sha256"),
            "ssm_in": self.model.metadata.get("ssm_in_sha256"),
            "ssm_out": self.model.metadata.get("ssm_out_sha256"),
        }
        self.bounds = request_bounds(cfg)
        self.springs = [
            {"id": s.id, "k": s.stiffness, "L0": s.free_length}
            for s in param_space_of(cfg).spring_catalog
        ]

    def reconstruct_mesh(self, b_out):
        return devectorize(reconstruct(self.model_out, b_out), self.template)


def _canonical_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def create_app(cfg: PipelineConfig) -> FastAPI:
    app = FastAPI(title="cranioplan", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    holder = {"artifacts": None, "error": "not loaded"}
    cache = OrderedDict()
    lock = threading.Lock()

    def load_artifacts():
        # build fully before swapping so readers only ever see a
        # complete bundle
        try:
            fresh = _Artifacts(cfg)
        except Exception as exc:
            holder["error"] = str(exc)
            return False
        holder["artifacts"] = fresh
        return True

    load_artifacts()
    app.state.reload_artifacts = load_artifacts

    def _ready() -> _Artifacts:
        art = holder["artifacts"]
        if art is None:
            raise HTTPException(
                status_code=503,
                detail=f"service artifacts not available: {holder['error']}")
        return art

    @app.exception_handler(RequestValidationError)
    def schema_violation(request: Request, exc: RequestValidationError):
        errors = [{"loc": [str(p) for p in e["loc"]], "msg": e["msg"]}
                  for e in exc.errors()]
        return JSONResponse(status_code=400, content={
            "detail": "request does not match the schema", "errors": errors})

    @app.get("/health")
    def health():
        return {"status": "ok", "ready": holder["artifacts"] is not None}

    @app.get("/model/info")
    def model_info():
        art = _ready()
        return {
            "k_in": art.k_in,
            "k_out": art.k_out,
            "vertex_count": len(art.template.vertices),
            "metrics": art.metrics,
            "hashes": art.hashes,
            "bounds": art.bounds,
            "springs": art.springs,
        }

    @app.post("/predict")
    def predict(req: PredictIn):
        art = _ready()
        payload = req.model_dump()
        problems = validate_request(cfg, payload)
        if problems:
            raise HTTPException(status_code=400, detail="; ".join(problems))
        if len(payload["b_in"]) != art.k_in:
            raise HTTPException(
                status_code=422,
                detail=f"b_in has {len(payload['b_in'])} coefficients, "
                       f"model expects {art.k_in}")

        x = request_features(payload, art.k_in)
        b_out = art.model.predict(x[None, :])[0]
        ci_pred = compute_cephalic_index(art.reconstruct_mesh(b_out))

        mesh_id = _canonical_id(payload)
        with lock:
            cache[mesh_id] = b_out
            cache.move_to_end(mesh_id)
            while len(cache) > _MESH_CACHE_SIZE:
                cache.popitem(last=False)

        return {
            "b_out": [float(v) for v in b_out],
            "ci_pred": float(ci_pred),
            "mesh_url": f"/mesh/{mesh_id}",
        }

    @app.get("/mesh/{mesh_id}")
    def mesh(mesh_id: str, request: Request):
        art = _ready()
        with lock:
            b_out = cache.get(mesh_id)
        if b_out is None:
            raise HTTPException(
                status_code=404,
                detail="unknown mesh id; POST /predict to create one")
        surface = art.reconstruct_mesh(b_out)
        accept = request.headers.get("accept", "")
        if "gltf" in accept.lower():
            return Response(content=mesh_to_glb(surface),
                            media_type="model/gltf-binary")
        return Response(content=stl_bytes(surface), media_type="model/stl")

    return app
