"""cranioplan: shape modeling, cranioplasty simulation and outcome surrogates.

The package covers the full planning pipeline: synthetic infant head
cohorts, template correspondence, statistical shape models, an elastic
spring-expansion simulator, design-of-experiments sweeps, multi-output
regression surrogates and an HTTP prediction service.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .mesh import (  # noqa: F401
    EmptyMeshError,
    Label,
    MeshError,
    OsteotomyResult,
    OsteotomySpec,
    PlaneSpec,
    TriMesh,
    align_principal_axes,
    apply_osteotomy,
    compute_cephalic_index,
    cut_with_plane,
    icosphere,
    label_regions,
    mean_surface_distance,
    offset_surface,
    surface_distance,
)
from .stl import StlParseError, load_stl, save_stl  # noqa: F401
