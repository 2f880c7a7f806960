"""Triangle mesh type and geometry operations for head and skull models.

Coordinates are millimetres. Meshes follow a fixed anatomical frame:
the anteroposterior axis is y (front of the head toward -y), the
superior direction is +z and x runs left/right. Vertices carry a
region label (bone plates, suture bands, base ring, spring notches).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Label",
    "MeshError",
    "EmptyMeshError",
    "TriMesh",
    "PlaneSpec",
    "OsteotomySpec",
    "OsteotomyResult",
    "triangle_areas",
    "triangle_normals",
    "vertex_normals",
    "mesh_edges",
    "boundary_edges",
    "icosphere",
    "uv_sphere",
    "transform_mesh",
    "align_principal_axes",
    "mesh_volume",
    "scale_to_volume",
    "compute_cephalic_index",
    "cut_with_plane",
    "offset_surface",
    "closest_points_on_surface",
    "surface_distance",
    "mean_surface_distance",
    "label_regions",
    "apply_osteotomy",
]

_DEGENERATE_AREA = 1e-12
_WELD_TOL = 1e-6  # mm


class Label(IntEnum):
    """Per-vertex anatomical region labels."""

    FREE = 0
    FRONTAL = 1
    PARIETAL = 2
    OCCIPITAL = 3
    CORONAL_SUTURE = 4
    LAMBDOID_SUTURE = 5
    BASE_RING = 6
    NOTCH = 7


class MeshError(ValueError):
    """Raised when mesh data violates a structural requirement."""


class EmptyMeshError(MeshError):
    """Raised when an operation would produce a mesh with no triangles."""


def _as_array(a, dtype, shape_tail):
    out = np.asarray(a, dtype=dtype)
    if out.ndim != 2 or out.shape[1] != shape_tail:
        raise MeshError(f"expected an (n, {shape_tail}) array, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle surface mesh with per-vertex labels.

    Parameters
    ----------
    vertices : (V, 3) float array, mm
    triangles : (T, 3) int array, indices into vertices
    labels : (V,) uint8 array of Label values, defaults to FREE
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        verts = _as_array(self.vertices, np.float64, 3)
        tris = _as_array(self.triangles, np.int32, 3)
        if len(tris) == 0:
            raise EmptyMeshError("mesh has no triangles")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise MeshError("triangle index out of range")
        if self.labels is None:
            labels = np.full(len(verts), Label.FREE, dtype=np.uint8)
        else:
            labels = np.asarray(self.labels, dtype=np.uint8)
            if labels.shape != (len(verts),):
                raise MeshError(
                    f"labels shape {labels.shape} does not match vertex count {len(verts)}"
                )
            labels = labels.copy()
        areas = triangle_areas_of(verts, tris)
        if (areas < _DEGENERATE_AREA).any():
            n_bad = int((areas < _DEGENERATE_AREA).sum())
            raise MeshError(f"{n_bad} degenerate (zero-area) triangles")
        _check_edge_manifold(tris)
        for arr in (verts, tris, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "labels", labels)

    # -- light conveniences -------------------------------------------------

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """New mesh with the same topology and labels, different positions."""
        return TriMesh(np.array(vertices, dtype=np.float64), self.triangles, self.labels)

    def with_labels(self, labels: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, labels)

    @staticmethod
    def from_triangle_soup(corners: np.ndarray, weld_tol: float = _WELD_TOL) -> "TriMesh":
        """Build a mesh from per-triangle corner coordinates.

        Coincident corners (within ``weld_tol``) are welded into shared
        vertices and triangles left degenerate by welding are dropped.
        """
        corners = np.asarray(corners, dtype=np.float64)
        if corners.ndim != 3 or corners.shape[1:] != (3, 3):
            raise MeshError(f"expected an (n, 3, 3) corner array, got {corners.shape}")
        flat = corners.reshape(-1, 3)
        keys = np.round(flat / weld_tol).astype(np.int64)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        verts = flat[first]
        tris = inverse.reshape(-1, 3).astype(np.int32)
        ok = (
            (tris[:, 0] != tris[:, 1])
            & (tris[:, 1] != tris[:, 2])
            & (tris[:, 0] != tris[:, 2])
        )
        tris = tris[ok]
        areas = triangle_areas_of(verts, tris)
        tris = tris[areas >= _DEGENERATE_AREA]
        if len(tris) == 0:
            raise EmptyMeshError("no non-degenerate triangles after welding")
        verts, tris, _ = _drop_unused_vertices(verts, tris, None)
        return TriMesh(verts, tris)


def _edge_keys(tris: np.ndarray) -> tuple[np.ndarray, int]:
    # undirected triangle edges as scalar keys lo * m + hi; scalar keys
    # sort and deduplicate far faster than (E, 2) rows
    e0 = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]]).astype(np.int64)
    e1 = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0]]).astype(np.int64)
    lo = np.minimum(e0, e1)
    hi = np.maximum(e0, e1)
    m = int(hi.max()) + 1
    return lo * m + hi, m


def _check_edge_manifold(tris: np.ndarray) -> None:
    # manifold-enough: every undirected edge is shared by at most two triangles
    keys, _ = _edge_keys(tris)
    _, counts = np.unique(keys, return_counts=True)
    if (counts > 2).any():
        n_bad = int((counts > 2).sum())
        raise MeshError(f"{n_bad} edges shared by more than two triangles")


def _drop_unused_vertices(verts, tris, labels):
    used = np.zeros(len(verts), dtype=bool)
    used[tris.ravel()] = True
    remap = np.cumsum(used) - 1
    new_tris = remap[tris].astype(np.int32)
    new_labels = labels[used] if labels is not None else None
    return verts[used], new_tris, new_labels


# -- basic differential quantities ------------------------------------------


def triangle_areas_of(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    return triangle_areas_of(mesh.vertices, mesh.triangles)


def triangle_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    v, t = mesh.vertices, mesh.triangles
    n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    if normalize:
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return n


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized cross products summed)."""
    v, t = mesh.vertices, mesh.triangles
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])  # 2*area*normal
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, t[:, k], fn)
    norms = np.linalg.norm(vn, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return vn / norms


def mesh_edges(mesh: TriMesh) -> np.ndarray:
    """Unique undirected edges as an (E, 2) sorted index array."""
    keys, m = _edge_keys(mesh.triangles)
    k = np.unique(keys)
    return np.stack([k // m, k % m], axis=1)


def boundary_edges(mesh: TriMesh) -> np.ndarray:
    """Edges used by exactly one triangle."""
    keys, m = _edge_keys(mesh.triangles)
    k, counts = np.unique(keys, return_counts=True)
    k = k[counts == 1]
    return np.stack([k // m, k % m], axis=1)


# -- primitive generators -----------------------------------------------------


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron. 0 -> 20 tris, 2 -> 320 tris, 3 -> 1280 tris."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts[0])
    tris = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_tris = []
        verts_list = list(verts)

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in edge_mid:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        tris = np.array(new_tris, dtype=np.int64)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, tris.astype(np.int32))


def uv_sphere(n_theta: int = 24, n_phi: int = 48, radius: float = 1.0,
              center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Latitude/longitude tessellated sphere (pole fans plus quad bands)."""
    if n_theta < 3 or n_phi < 3:
        raise MeshError("uv_sphere needs n_theta >= 3 and n_phi >= 3")
    thetas = np.linspace(0.0, np.pi, n_theta + 1)[1:-1]
    phis = 2.0 * np.pi * np.arange(n_phi) / n_phi
    verts = [np.array([0.0, 0.0, 1.0])]
    for th in thetas:
        ring = np.stack(
            [np.sin(th) * np.cos(phis), np.sin(th) * np.sin(phis),
             np.full(n_phi, np.cos(th))], axis=1)
        verts.append(ring)
    verts.append(np.array([0.0, 0.0, -1.0])[None, :])
    verts = np.concatenate([np.atleast_2d(v) for v in verts])
    tris = []
    ring0 = 1
    for j in range(n_phi):
        tris.append([0, ring0 + j, ring0 + (j + 1) % n_phi])
    for i in range(len(thetas) - 1):
        a0, b0 = ring0 + i * n_phi, ring0 + (i + 1) * n_phi
        for j in range(n_phi):
            j1 = (j + 1) % n_phi
            tris.append([a0 + j, b0 + j, b0 + j1])
            tris.append([a0 + j, b0 + j1, a0 + j1])
    south = len(verts) - 1
    last = ring0 + (len(thetas) - 1) * n_phi
    for j in range(n_phi):
        tris.append([south, last + (j + 1) % n_phi, last + j])
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, np.array(tris, dtype=np.int32))


# -- rigid motion and global measures ----------------------------------------


def transform_mesh(mesh: TriMesh, rotation: np.ndarray = None,
                   translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> TriMesh:
    v = mesh.vertices * float(scale)
    if rotation is not None:
        v = v @ np.asarray(rotation, dtype=np.float64).T
    v = v + np.asarray(translation, dtype=np.float64)
    return mesh.with_vertices(v)


def align_principal_axes(mesh: TriMesh) -> TriMesh:
    """Center the mesh and rotate its principal axes onto the anatomical frame.

    The axis of largest positional variance becomes y (anteroposterior),
    the second becomes x and the smallest becomes z. Signs are chosen to
    keep the rotation proper and closest to the identity.
    """
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    cov = np.cov(v.T)
    w, vecs = np.linalg.eigh(cov)  # ascending
    # columns: x <- second, y <- largest, z <- smallest
    axes = np.stack([vecs[:, 1], vecs[:, 2], vecs[:, 0]], axis=1)
    for k in range(3):
        if axes[k, k] < 0:
            axes[:, k] = -axes[:, k]
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return mesh.with_vertices(v @ axes)


def mesh_volume(mesh: TriMesh) -> float:
    """Signed enclosed volume (divergence theorem; meaningful for closed meshes)."""
    v, t = mesh.vertices, mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def scale_to_volume(mesh: TriMesh, target_volume: float) -> TriMesh:
    """Uniformly scale about the centroid so the enclosed volume matches."""
    vol = mesh_volume(mesh)
    if vol <= 0:
        raise MeshError("mesh volume is not positive; cannot rescale")
    if target_volume <= 0:
        raise MeshError("target volume must be positive")
    s = (target_volume / vol) ** (1.0 / 3.0)
    c = mesh.vertices.mean(axis=0)
    return mesh.with_vertices((mesh.vertices - c) * s + c)


def compute_cephalic_index(mesh: TriMesh) -> float:
    """Cephalic index: 100 * (maximal width along x) / (maximal length along y)."""
    lo, hi = mesh.bounds()
    length = hi[1] - lo[1]
    if length <= 0:
        raise MeshError("mesh has zero anteroposterior extent")
    return float(100.0 * (hi[0] - lo[0]) / length)


# -- plane specification and cutting -----------------------------------------


@dataclass(frozen=True)
class PlaneSpec:
    """Oriented plane given by a point and a unit normal (within 1e-9)."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise MeshError("plane normal must be unit length (within 1e-9)")
        p.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)

    @staticmethod
    def from_point_normal(point, normal) -> "PlaneSpec":
        n = np.asarray(normal, dtype=np.float64).reshape(3)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise MeshError("plane normal must be nonzero")
        return PlaneSpec(np.asarray(point, dtype=np.float64), n / nn)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.point) @ self.normal


def cut_with_plane(mesh: TriMesh, plane: PlaneSpec, eps: float = 1e-9) -> TriMesh:
    """Keep the part of the mesh on the positive side of the plane.

    Triangles crossing the plane are split; intersection vertices are
    created once per cut edge (so the new boundary stays welded) and
    labeled BASE_RING. Raises EmptyMeshError when nothing remains.
    """
    s = plane.signed_distance(mesh.vertices)
    keep_v = s >= -eps
    tri_keep_count = keep_v[mesh.triangles].sum(axis=1)
    pos_any = (s[mesh.triangles] > eps).any(axis=1)
    full = tri_keep_count == 3
    crossing = np.nonzero((~full) & pos_any)[0]
    if full.all():
        return mesh
    if not pos_any.any():
        raise EmptyMeshError("entire mesh lies on the negative side of the plane")

    verts = list(mesh.vertices)
    labels = list(mesh.labels)
    cut_point: dict[tuple[int, int], int] = {}

    def edge_point(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cut_point:
            t = s[i] / (s[i] - s[j])
            p = mesh.vertices[i] + t * (mesh.vertices[j] - mesh.vertices[i])
            cut_point[key] = len(verts)
            verts.append(p)
            labels.append(np.uint8(Label.BASE_RING))
        return cut_point[key]

    new_tris = list(mesh.triangles[full])
    for ti in crossing:
        tri = mesh.triangles[ti]
        # clip the triangle against the halfspace, keeping vertex order
        poly: list[int] = []
        for k in range(3):
            i, j = tri[k], tri[(k + 1) % 3]
            if s[i] >= -eps:
                poly.append(i)
            if (s[i] > eps and s[j] < -eps) or (s[i] < -eps and s[j] > eps):
                poly.append(edge_point(i, j))
        for k in range(1, len(poly) - 1):
            new_tris.append(np.array([poly[0], poly[k], poly[k + 1]]))

    verts = np.array(verts)
    tris = np.array(new_tris, dtype=np.int32)
    labels = np.array(labels, dtype=np.uint8)
    areas = triangle_areas_of(verts, tris)
    tris = tris[areas >= _DEGENERATE_AREA]
    if len(tris) == 0:
        raise EmptyMeshError("plane cut left no usable triangles")
    verts, tris, labels = _drop_unused_vertices(verts, tris, labels)
    return TriMesh(verts, tris, labels)


def offset_surface(mesh: TriMesh, distance_mm: float) -> TriMesh:
    """Move every vertex along its area-weighted normal.

    Positive distances offset outward (assuming outward-oriented
    triangles). A warning reports the count of triangles whose normal
    flips, which indicates local self-intersection.
    """
    n = vertex_normals(mesh)
    out = mesh.with_vertices(mesh.vertices + float(distance_mm) * n)
    before = triangle_normals(mesh, normalize=False)
    after = triangle_normals(out, normalize=False)
    flipped = int((np.einsum("ij,ij->i", before, after) < 0).sum())
    if flipped:
        warnings.warn(
            f"offset_surface flipped {flipped} triangle normals (self-intersection)",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


# -- closest-point queries and surface distance ------------------------------


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle (a, b, c) to each point p, vectorized.

    Standard region-based barycentric clamping. All inputs are (n, 3).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_vc = d1 - d3
    v_ab = np.where(denom_vc != 0, d1 / np.where(denom_vc == 0, 1.0, denom_vc), 0.0)
    denom_bc = (d4 - d3) + (d5 - d6)
    w_bc = np.where(denom_bc != 0, (d4 - d3) / np.where(denom_bc == 0, 1.0, denom_bc), 0.0)
    denom_ac = d2 - d6
    w_ac = np.where(denom_ac != 0, d2 / np.where(denom_ac == 0, 1.0, denom_ac), 0.0)

    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v_in = vb / denom
    w_in = vc / denom

    q = a + v_in[:, None] * ab + w_in[:, None] * ac  # interior default
    q = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[:, None],
                 a + np.clip(v_ab, 0, 1)[:, None] * ab, q)
    q = np.where(((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0))[:, None],
                 b + np.clip(w_bc, 0, 1)[:, None] * (c - b), q)
    q = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[:, None],
                 a + np.clip(w_ac, 0, 1)[:, None] * ac, q)
    q = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, q)
    q = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, q)
    q = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, q)
    return q


def closest_points_on_surface(points: np.ndarray, mesh: TriMesh,
                              method: str = "auto", k: int = 12):
    """Closest surface points on ``mesh`` for a set of query points.

    Returns (closest_points, distances, triangle_indices). ``method``
    is "brute" (all point-triangle pairs, exact), "kdtree" (candidate
    triangles from a centroid tree plus nearest-vertex incidence) or
    "auto" which picks by workload size.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    v, t = mesh.vertices, mesh.triangles
    n_pairs = len(pts) * len(t)
    if method == "auto":
        method = "brute" if n_pairs <= 4_000_000 else "kdtree"

    if method == "brute":
        best_d2 = np.full(len(pts), np.inf)
        best_q = np.zeros_like(pts)
        best_t = np.zeros(len(pts), dtype=np.int64)
        chunk = max(1, int(2_000_000 // max(len(t), 1)))
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        for s0 in range(0, len(pts), chunk):
            p = pts[s0:s0 + chunk]
            m = len(p)
            pp = np.repeat(p, len(t), axis=0)
            qa = np.tile(a, (m, 1))
            qb = np.tile(b, (m, 1))
            qc = np.tile(c, (m, 1))
            q = _closest_on_triangles(pp, qa, qb, qc)
            d2 = np.einsum("ij,ij->i", pp - q, pp - q).reshape(m, len(t))
            ti = d2.argmin(axis=1)
            rows = np.arange(m)
            best_d2[s0:s0 + chunk] = d2[rows, ti]
            best_q[s0:s0 + chunk] = q.reshape(m, len(t), 3)[rows, ti]
            best_t[s0:s0 + chunk] = ti
        if single:
            return best_q[0], float(np.sqrt(best_d2[0])), int(best_t[0])
        return best_q, np.sqrt(best_d2), best_t

    if method != "kdtree":
        raise ValueError(f"unknown method {method!r}")

    centroids = v[t].mean(axis=1)
    ctree = cKDTree(centroids)
    kk = min(k, len(t))
    _, cand = ctree.query(pts, k=kk)
    cand = np.atleast_2d(cand)
    # also consider triangles touching the nearest mesh vertex
    vtree = cKDTree(v)
    _, nv = vtree.query(pts, k=1)
    incident: list[list[int]] = [[] for _ in range(len(v))]
    for ti, tri in enumerate(t):
        for vi in tri:
            incident[vi].append(ti)
    max_inc = max(len(x) for x in incident)
    inc_arr = np.full((len(v), max_inc), -1, dtype=np.int64)
    for vi, lst in enumerate(incident):
        inc_arr[vi, :len(lst)] = lst
    cand = np.concatenate([cand, inc_arr[nv]], axis=1)

    best_d2 = np.full(len(pts), np.inf)
    best_q = np.zeros_like(pts)
    best_t = np.zeros(len(pts), dtype=np.int64)
    for col in range(cand.shape[1]):
        ti = cand[:, col]
        ok = ti >= 0
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        tri = t[ti[idx]]
        q = _closest_on_triangles(pts[idx], v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]])
        d2 = np.einsum("ij,ij->i", pts[idx] - q, pts[idx] - q)
        better = d2 < best_d2[idx]
        upd = idx[better]
        best_d2[upd] = d2[better]
        best_q[upd] = q[better]
        best_t[upd] = ti[upd]
    if single:
        return best_q[0], float(np.sqrt(best_d2[0])), int(best_t[0])
    return best_q, np.sqrt(best_d2), best_t


def surface_distance(source: TriMesh, target: TriMesh, method: str = "auto") -> np.ndarray:
    """Unsigned point-to-surface distance from each source vertex to the target."""
    _, d, _ = closest_points_on_surface(source.vertices, target, method=method)
    return d


def mean_surface_distance(source: TriMesh, target: TriMesh,
                          exclude_lower_fraction: float = 0.0,
                          method: str = "auto") -> float:
    """Mean surface distance, optionally ignoring the lowest source vertices.

    ``exclude_lower_fraction=0.25`` drops the quarter of source vertices
    with the smallest z before averaging, which removes the unreliable
    region near the mesh base.
    """
    d = surface_distance(source, target, method=method)
    if exclude_lower_fraction > 0.0:
        z = source.vertices[:, 2]
        zcut = np.quantile(z, exclude_lower_fraction)
        d = d[z >= zcut]
    return float(d.mean())


# -- anatomical labeling and the osteotomy -----------------------------------


def label_regions(mesh: TriMesh, coronal_frac: float, lambdoid_frac: float,
                  suture_width_mm: float) -> TriMesh:
    """Assign plate and suture labels by position along the y axis.

    Two transverse planes placed at the given fractions of the y extent
    define the coronal and lambdoid sutures; vertices within half the
    suture width of a plane get the suture label. Between the bands the
    skull is PARIETAL, anterior of the coronal band FRONTAL, posterior
    of the lambdoid band OCCIPITAL. BASE_RING labels are preserved.
    """
    if not (0.0 < coronal_frac < lambdoid_frac < 1.0):
        raise MeshError("require 0 < coronal_frac < lambdoid_frac < 1")
    if suture_width_mm < 0:
        raise MeshError("suture width must be non-negative")
    lo, hi = mesh.bounds()
    y0, y1 = lo[1], hi[1]
    yc = y0 + coronal_frac * (y1 - y0)
    yl = y0 + lambdoid_frac * (y1 - y0)
    half = suture_width_mm / 2.0
    if yc + half >= yl - half:
        raise MeshError("suture bands overlap; reduce width or separate planes")
    y = mesh.vertices[:, 1]
    labels = np.full(mesh.num_vertices, Label.PARIETAL, dtype=np.uint8)
    labels[y <= yc - half] = Label.FRONTAL
    labels[y >= yl + half] = Label.OCCIPITAL
    labels[np.abs(y - yc) < half] = Label.CORONAL_SUTURE
    labels[np.abs(y - yl) < half] = Label.LAMBDOID_SUTURE
    labels[mesh.labels == Label.BASE_RING] = Label.BASE_RING
    return mesh.with_labels(labels)


@dataclass(frozen=True)
class OsteotomySpec:
    """Parietal osteotomy parameters as fractions of skull dimensions.

    ``a_ratio`` and ``ap_ratio`` place the front and back spring notch
    stations along the midline, measured from the coronal suture center
    as fractions of the skull length. ``lat_ratio`` is the removed strip
    width as a fraction of the skull width. The notch diameter is mm.
    """

    a_ratio: float
    ap_ratio: float
    lat_ratio: float
    notch_diameter: float = 5.0

    def __post_init__(self):
        if not (0.0 < self.a_ratio < self.ap_ratio < 1.0):
            raise MeshError("require 0 < a_ratio < ap_ratio < 1")
        if not (0.0 < self.lat_ratio < 1.0):
            raise MeshError("require 0 < lat_ratio < 1")
        if self.notch_diameter <= 0:
            raise MeshError("notch diameter must be positive")


@dataclass(frozen=True)
class OsteotomyResult:
    """Cut skull plus the bookkeeping needed for springs and gap closure.

    ``mesh`` is the skull with the midline strip removed and notch
    vertices labeled NOTCH. The four notch index sets refer to ``mesh``.
    ``kept_indices`` maps cut-mesh vertices back to the input mesh and
    ``removed_indices`` lists the vertices that were cut away.
    """

    mesh: TriMesh
    anterior_left: np.ndarray
    anterior_right: np.ndarray
    posterior_left: np.ndarray
    posterior_right: np.ndarray
    kept_indices: np.ndarray
    removed_indices: np.ndarray
    spec: OsteotomySpec
    reference_y: float
    gap_halfwidth: float

    @property
    def notch_ids(self):
        return (self.anterior_left, self.anterior_right,
                self.posterior_left, self.posterior_right)


def _notch_set(verts, eligible, center, radius):
    d = np.linalg.norm(verts - center, axis=1)
    d = np.where(eligible, d, np.inf)
    ids = np.nonzero(d <= radius)[0]
    if len(ids) == 0:
        dmin = d.min()
        if not np.isfinite(dmin):
            raise MeshError("no eligible vertices near a notch center")
        ids = np.nonzero(d <= dmin + 1e-9)[0]
    return ids.astype(np.int64)


def apply_osteotomy(mesh: TriMesh, spec: OsteotomySpec) -> OsteotomyResult:
    """Remove the midline parietal strip and mark the spring notch sets.

    The strip is centered on the sagittal midline, spans from the
    coronal suture band to the lambdoid suture band and is
    ``lat_ratio * skull_width`` wide. Notch sets (one pair per spring,
    flanking the gap) collect eligible parietal vertices within half the
    notch diameter of each station; they stay on the retained bone.
    """
    labels = mesh.labels
    cor = labels == Label.CORONAL_SUTURE
    lam = labels == Label.LAMBDOID_SUTURE
    par = labels == Label.PARIETAL
    if not cor.any() or not lam.any():
        raise MeshError("mesh has no suture labels; run label_regions first")
    if not par.any():
        raise MeshError("mesh has no parietal vertices")

    lo, hi = mesh.bounds()
    length = hi[1] - lo[1]
    width = hi[0] - lo[0]
    y_ref = float(mesh.vertices[cor, 1].mean())
    x_mid = float(mesh.vertices[cor, 0].mean())
    y_cor_end = float(mesh.vertices[cor, 1].max())
    y_lam_start = float(mesh.vertices[lam, 1].min())

    half_gap = spec.lat_ratio * width / 2.0
    y_a = y_ref + spec.a_ratio * length
    y_ap = y_ref + spec.ap_ratio * length
    r_notch = spec.notch_diameter / 2.0
    if y_a - r_notch <= y_cor_end:
        raise MeshError(
            f"front notch station y={y_a:.2f} reaches the coronal suture "
            f"(parietal starts at y={y_cor_end:.2f})")
    if y_ap + r_notch >= y_lam_start:
        raise MeshError(
            f"back notch station y={y_ap:.2f} reaches the lambdoid suture "
            f"(parietal ends at y={y_lam_start:.2f})")

    v = mesh.vertices
    in_strip = (
        par
        & (v[:, 1] > y_cor_end)
        & (v[:, 1] < y_lam_start)
        & (np.abs(v[:, 0] - x_mid) < half_gap)
    )
    removed = np.nonzero(in_strip)[0]
    if len(removed) == 0:
        raise MeshError("osteotomy strip contains no vertices; mesh too coarse")
    if not (labels[removed] == Label.PARIETAL).all():
        raise MeshError("osteotomy strip extends beyond the parietal region")

    keep = ~in_strip
    tri_ok = keep[mesh.triangles].all(axis=1)
    new_index = np.cumsum(keep) - 1
    tris = new_index[mesh.triangles[tri_ok]].astype(np.int32)
    new_verts = v[keep]
    new_labels = labels[keep].copy()
    kept_indices = np.nonzero(keep)[0]

    cut = TriMesh(new_verts, tris, new_labels)
    eligible = new_labels == Label.PARIETAL

    def station_center(y_s, side):
        # nominal notch center on the strip edge at the station height
        probe = np.array([x_mid + side * half_gap, y_s, 0.0])
        dxy = np.hypot(new_verts[:, 0] - probe[0], new_verts[:, 1] - probe[1])
        dxy = np.where(eligible, dxy, np.inf)
        zref = new_verts[int(np.argmin(dxy)), 2]
        return np.array([probe[0], y_s, zref])

    sets = {}
    for name, y_s, side in (
        ("anterior_left", y_a, -1.0),
        ("anterior_right", y_a, +1.0),
        ("posterior_left", y_ap, -1.0),
        ("posterior_right", y_ap, +1.0),
    ):
        ids = _notch_set(new_verts, eligible, station_center(y_s, side), r_notch)
        sets[name] = ids
        new_labels[ids] = Label.NOTCH

    cut = cut.with_labels(new_labels)
    return OsteotomyResult(
        mesh=cut,
        anterior_left=sets["anterior_left"],
        anterior_right=sets["anterior_right"],
        posterior_left=sets["posterior_left"],
        posterior_right=sets["posterior_right"],
        kept_indices=kept_indices,
        removed_indices=removed,
        spec=spec,
        reference_y=y_ref,
        gap_halfwidth=half_gap,
    )
