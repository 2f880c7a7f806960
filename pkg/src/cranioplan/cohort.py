"""Synthetic infant head cohort generation.

Heads are built by deforming one shared template dome, so every
patient mesh in a cohort has identical topology and vertex ordering.
The template is a structured ring tessellation that is mirror
symmetric about the midsagittal plane, which the simulator relies on.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mesh import Label, MeshError, TriMesh, compute_cephalic_index, label_regions, offset_surface

log = logging.getLogger(__name__)

__all__ = [
    "PatientParams",
    "PopulationParams",
    "CohortSampling",
    "PatientRecord",
    "template_dome",
    "generate_patient",
    "generate_cohort",
    "head_to_skull",
    "write_cohort_manifest",
    "read_cohort_manifest",
]

# canonical dome: unit sphere cut at z = -0.35
_BASE_Z = -0.35
_THETA_BASE = float(np.arccos(_BASE_Z))
_BASE_SCALE_MM = 70.0
_SUPERELLIPSE_EXPONENT = 2.5
N_BUMP_FIELDS = 8

MIN_RESOLUTION = 24
MAX_RESOLUTION = 48
DEFAULT_RESOLUTION = 30

# suture plane positions as fractions of the anteroposterior extent;
# chosen so the widest notch station stays inside the parietal span
CORONAL_FRAC = 0.20
LAMBDOID_FRAC = 0.86


@dataclass(frozen=True)
class PatientParams:
    """Latent shape parameters for one synthetic patient.

    ``ap_elongation`` stretches the head along y (>= 1 for the
    scaphocephalic cohort), ``lateral_narrowing`` compresses x (<= 1)
    and ``height_factor`` scales z. ``bump_amplitudes`` weight eight
    smooth low-order surface fields (mm); together with the three axis
    scales they give the population eleven shape degrees of freedom.
    """

    age_days: float
    ap_elongation: float
    lateral_narrowing: float
    height_factor: float
    bump_amplitudes: tuple = (0.0,) * N_BUMP_FIELDS
    seed: int = 0

    def __post_init__(self):
        if not (120.0 <= self.age_days <= 240.0):
            raise ValueError("age_days must lie in [120, 240]")
        if self.ap_elongation < 1.0:
            raise ValueError("ap_elongation must be >= 1")
        if self.lateral_narrowing > 1.0 or self.lateral_narrowing <= 0.0:
            raise ValueError("lateral_narrowing must lie in (0, 1]")
        if self.height_factor <= 0.0:
            raise ValueError("height_factor must be positive")
        amps = tuple(float(a) for a in self.bump_amplitudes)
        if len(amps) != N_BUMP_FIELDS:
            raise ValueError(f"expected {N_BUMP_FIELDS} bump amplitudes")
        object.__setattr__(self, "bump_amplitudes", amps)


@dataclass(frozen=True)
class PopulationParams:
    """Population-level tissue constants (mm)."""

    t_skull: float = 2.02
    t_skin: float = 3.42
    suture_width: float = 2.0

    def __post_init__(self):
        if min(self.t_skull, self.t_skin, self.suture_width) < 0:
            raise ValueError("population thicknesses must be non-negative")


@dataclass(frozen=True)
class CohortSampling:
    """Distribution bounds used by generate_cohort."""

    age_days: tuple = (120.0, 240.0)
    ci_target: tuple = (66.5, 75.5)
    lateral_narrowing: tuple = (0.92, 1.0)
    height_factor: tuple = (0.80, 0.92)
    bump_sigmas: tuple = (1.0, 0.8, 0.6, 0.45, 0.35, 0.25, 0.18, 0.14)
    bump_clip_sigmas: float = 2.0


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    params: PatientParams
    head: TriMesh


@lru_cache(maxsize=8)
def template_dome(resolution: int = DEFAULT_RESOLUTION) -> TriMesh:
    """Canonical unit dome (base ring labeled) shared by a cohort.

    ``resolution`` is the latitude ring count; it must be even so the
    tessellation (including the quad diagonals) mirrors exactly across
    the x=0 plane. Vertex count is 1 + 2*resolution^2.
    """
    rings = int(resolution)
    if rings % 2 != 0 or not (MIN_RESOLUTION <= rings <= MAX_RESOLUTION):
        raise MeshError(
            f"resolution must be an even integer in [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")
    m = 2 * rings
    thetas = np.linspace(0.0, _THETA_BASE, rings + 1)[1:]
    phis = 2.0 * np.pi * np.arange(m) / m
    verts = [np.array([[0.0, 0.0, 1.0]])]
    for th in thetas:
        verts.append(
            np.stack(
                [np.sin(th) * np.cos(phis), np.sin(th) * np.sin(phis),
                 np.full(m, np.cos(th))],
                axis=1,
            )
        )
    verts = np.concatenate(verts)

    tris = []
    for j in range(m):
        tris.append([0, 1 + j, 1 + (j + 1) % m])
    for i in range(rings - 1):
        a0 = 1 + i * m
        b0 = 1 + (i + 1) * m
        for j in range(m):
            j1 = (j + 1) % m
            if j % 2 == 0:  # alternate diagonals to keep the mirror symmetry
                tris.append([a0 + j, b0 + j, b0 + j1])
                tris.append([a0 + j, b0 + j1, a0 + j1])
            else:
                tris.append([a0 + j, b0 + j, a0 + j1])
                tris.append([a0 + j1, b0 + j, b0 + j1])
    labels = np.full(len(verts), Label.FREE, dtype=np.uint8)
    labels[1 + (rings - 1) * m:] = Label.BASE_RING
    return TriMesh(verts, np.array(tris, dtype=np.int32), labels)


def _bump_fields(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Eight smooth low-order fields, rows aligned with bump_amplitudes."""
    st = np.sin(theta)
    return np.stack(
        [
            st * np.cos(phi),
            st * np.sin(phi),
            st**2 * np.cos(2 * phi),
            st**2 * np.sin(2 * phi),
            np.cos(np.pi * theta / _THETA_BASE),
            st**3 * np.sin(3 * phi),
            st**3 * np.cos(3 * phi),
            np.cos(2 * np.pi * theta / _THETA_BASE),
        ]
    )


def generate_patient(params: PatientParams,
                     resolution: int = DEFAULT_RESOLUTION) -> TriMesh:
    """Deterministic synthetic head surface for one patient.

    The template dome is reshaped by a superellipsoid-like radius
    modulation, scaled along the anatomical axes and perturbed by the
    patient's bump fields. All deformation fields taper to zero at the
    base ring, which therefore stays planar.
    """
    dome = template_dome(resolution)
    p = dome.vertices
    theta = np.arccos(np.clip(p[:, 2], -1.0, 1.0))
    phi = np.arctan2(p[:, 1], p[:, 0])
    taper = np.cos(0.5 * np.pi * theta / _THETA_BASE)

    e = _SUPERELLIPSE_EXPONENT
    r_super = (np.abs(p[:, 0]) ** e + np.abs(p[:, 1]) ** e + np.abs(p[:, 2]) ** e) ** (-1.0 / e)
    radius = 1.0 + (r_super - 1.0) * taper
    shaped = p * radius[:, None]

    scale = _BASE_SCALE_MM * np.array(
        [params.lateral_narrowing, params.ap_elongation, params.height_factor])
    shaped = shaped * scale

    amps = np.asarray(params.bump_amplitudes)
    if np.any(amps != 0.0):
        fields = _bump_fields(theta, phi)
        delta = (amps @ fields) * taper
        shaped = shaped + delta[:, None] * p

    return TriMesh(shaped, dome.triangles, dome.labels)


def generate_cohort(n_patients: int, master_seed: int,
                    sampling: CohortSampling = CohortSampling(),
                    resolution: int = DEFAULT_RESOLUTION) -> list[PatientRecord]:
    """Reproducible cohort of synthetic heads sharing one template.

    Parameters are drawn from ``sampling``; the anteroposterior
    elongation is derived from a target cephalic index so the cohort
    lands in the scaphocephalic range.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    rng = np.random.default_rng(master_seed)
    records = []
    for i in range(n_patients):
        seed = int(rng.integers(0, 2**31 - 1))
        prng = np.random.default_rng(seed)
        age = float(prng.uniform(*sampling.age_days))
        ci0 = float(prng.uniform(*sampling.ci_target))
        lateral = float(prng.uniform(*sampling.lateral_narrowing))
        height = float(prng.uniform(*sampling.height_factor))
        sig = np.asarray(sampling.bump_sigmas, dtype=float)
        clip = sampling.bump_clip_sigmas * sig
        bumps = np.clip(prng.normal(0.0, sig), -clip, clip)
        params = PatientParams(
            age_days=age,
            ap_elongation=lateral / (ci0 / 100.0),
            lateral_narrowing=lateral,
            height_factor=height,
            bump_amplitudes=tuple(bumps),
            seed=seed,
        )
        head = generate_patient(params, resolution=resolution)
        records.append(PatientRecord(patient_id=f"p{i:03d}", params=params, head=head))
    return records


def head_to_skull(head: TriMesh, pop: PopulationParams,
                  coronal_frac: float = CORONAL_FRAC,
                  lambdoid_frac: float = LAMBDOID_FRAC) -> TriMesh:
    """Derive the labeled outer skull surface from a head surface.

    The scalp thickness is removed by an inward offset, then plate and
    suture labels are assigned from the transverse suture planes.
    """
    skull = offset_surface(head, -pop.t_skin)
    return label_regions(skull, coronal_frac, lambdoid_frac, pop.suture_width)


# -- cohort manifest ----------------------------------------------------------

_MANIFEST_FIELDS = (
    ["patient_id", "seed", "age_days", "ap_elongation", "lateral_narrowing",
     "height_factor"]
    + [f"bump_{k + 1}" for k in range(N_BUMP_FIELDS)]
    + ["cephalic_index", "mesh_path"]
)


def write_cohort_manifest(path, records: list[PatientRecord],
                          mesh_paths: dict[str, str]) -> None:
    """One CSV row per patient: id, seed, shape parameters, CI, mesh path."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_MANIFEST_FIELDS)
        for rec in records:
            p = rec.params
            w.writerow(
                [rec.patient_id, p.seed, repr(p.age_days), repr(p.ap_elongation),
                 repr(p.lateral_narrowing), repr(p.height_factor)]
                + [repr(a) for a in p.bump_amplitudes]
                + [repr(compute_cephalic_index(rec.head)), mesh_paths[rec.patient_id]]
            )


def read_cohort_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"cohort manifest {path} is empty")
    out = []
    for row in rows:
        rec = dict(row)
        for key in _MANIFEST_FIELDS[2:-1]:
            rec[key] = float(rec[key])
        rec["seed"] = int(rec["seed"])
        out.append(rec)
    return out


def params_from_manifest_row(row: dict) -> PatientParams:
    return PatientParams(
        age_days=row["age_days"],
        ap_elongation=row["ap_elongation"],
        lateral_narrowing=row["lateral_narrowing"],
        height_factor=row["height_factor"],
        bump_amplitudes=tuple(row[f"bump_{k + 1}"] for k in range(N_BUMP_FIELDS)),
        seed=row["seed"],
    )
