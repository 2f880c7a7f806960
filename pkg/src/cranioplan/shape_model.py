"""Statistical shape model built by PCA over corresponded meshes.

Shapes enter as flat coordinate vectors [x1, y1, z1, x2, ...]. The
eigenproblem is solved on the N x N Gram matrix of centered shape
vectors rather than the 3V x 3V covariance, which is exact for the
nonzero spectrum and cheap for N much smaller than 3V. Eigenvalues are
those of the sample covariance (divisor N-1). A shape m is encoded as
b = modes^T (m - mean) and reconstructed as mean + modes @ b.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh

__all__ = [
    "ShapeModelError",
    "ShapeModel",
    "vectorize",
    "devectorize",
    "build_shape_model",
    "explained_cdf",
    "select_modes",
    "truncate_modes",
    "project",
    "reconstruct",
    "save_shape_model",
    "load_shape_model",
]

_EIG_REL_TOL = 1e-12  # eigenvalues below max * tol count as zero variance


class ShapeModelError(ValueError):
    """Raised for malformed shape-model inputs."""


@dataclass(frozen=True)
class ShapeModel:
    """PCA shape model.

    mean : (3V,) mean shape vector
    modes : (3V, k) orthonormal mode matrix, columns sorted by variance
    eigenvalues : (N-1,) sample-covariance eigenvalues, descending
    explained : (N-1,) eigenvalue fractions of total variance
    k : retained mode count (k <= number of nonzero eigenvalues)
    sample_count : N, size of the training set
    """

    mean: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    explained: np.ndarray
    k: int
    sample_count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        modes = np.asarray(self.modes, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64)
        expl = np.asarray(self.explained, dtype=np.float64)
        if modes.ndim != 2 or modes.shape[0] != mean.shape[0]:
            raise ShapeModelError("modes matrix does not match mean length")
        if modes.shape[1] != self.k:
            raise ShapeModelError("k does not match mode count")
        if eig.shape != expl.shape:
            raise ShapeModelError("eigenvalue and explained lengths differ")
        if len(eig) > 1 and (np.diff(eig) > 1e-12).any():
            raise ShapeModelError("eigenvalues must be sorted descending")
        for arr in (mean, modes, eig, expl):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "explained", expl)


def vectorize(mesh: TriMesh) -> np.ndarray:
    """Flatten vertex coordinates to [x1, y1, z1, x2, y2, z2, ...]."""
    return mesh.vertices.reshape(-1).copy()


def devectorize(vector: np.ndarray, template: TriMesh) -> TriMesh:
    """Rebuild a mesh from a shape vector using the template topology."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (template.num_vertices * 3,):
        raise ShapeModelError(
            f"shape vector length {v.shape} does not match template "
            f"({template.num_vertices * 3} coordinates)")
    return template.with_vertices(v.reshape(-1, 3))


def build_shape_model(shapes: np.ndarray) -> ShapeModel:
    """PCA via the Gram-matrix trick.

    ``shapes`` is (N, 3V) with N >= 2. The returned model keeps every
    mode with nonzero variance (at most N-1). Mode signs follow a fixed
    convention: the component with the largest magnitude is positive.
    Identical shapes produce a zero-variance model with k = 0.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.ndim != 2:
        raise ShapeModelError("shapes must be an (N, 3V) array")
    n = len(shapes)
    if n < 2:
        raise ShapeModelError("need at least two shapes")
    mean = shapes.mean(axis=0)
    dev = (shapes - mean).T  # (3V, N)
    gram = dev.T @ dev / (n - 1)
    w, v = np.linalg.eigh(gram)  # ascending
    order = np.argsort(w)[::-1][: n - 1]  # drop the centering null direction
    eigenvalues = np.maximum(w[order], 0.0)
    vecs = v[:, order]

    total = eigenvalues.sum()
    if total > 0:
        explained = eigenvalues / total
        nonzero = eigenvalues > eigenvalues[0] * _EIG_REL_TOL
    else:
        explained = np.zeros_like(eigenvalues)
        nonzero = np.zeros(len(eigenvalues), dtype=bool)
    k = int(nonzero.sum())

    modes = dev @ vecs[:, :k]
    if k:
        modes /= np.linalg.norm(modes, axis=0)
        # sign convention: largest-magnitude component positive
        idx = np.abs(modes).argmax(axis=0)
        signs = np.sign(modes[idx, np.arange(k)])
        signs[signs == 0] = 1.0
        modes *= signs
    return ShapeModel(
        mean=mean,
        modes=modes,
        eigenvalues=eigenvalues,
        explained=explained,
        k=k,
        sample_count=n,
    )


def explained_cdf(model: ShapeModel) -> np.ndarray:
    """Cumulative explained-variance fractions (non-decreasing, ends at 1)."""
    return np.cumsum(model.explained)


def select_modes(model: ShapeModel, threshold: float) -> int:
    """Smallest k whose cumulative explained variance reaches the threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ShapeModelError("threshold must lie in (0, 1]")
    if model.k == 0:
        return 0
    cdf = explained_cdf(model)
    reached = np.nonzero(cdf >= threshold - 1e-12)[0]
    if len(reached) == 0:
        return model.k
    return min(int(reached[0]) + 1, model.k)


def truncate_modes(model: ShapeModel, k: int) -> ShapeModel:
    """New model keeping only the first k modes (spectra stay complete)."""
    if not (0 <= k <= model.k):
        raise ShapeModelError(f"k must lie in [0, {model.k}]")
    return ShapeModel(
        mean=model.mean,
        modes=model.modes[:, :k],
        eigenvalues=model.eigenvalues,
        explained=model.explained,
        k=k,
        sample_count=model.sample_count,
    )


def project(model: ShapeModel, shape: np.ndarray) -> np.ndarray:
    """Mode coefficients b = modes^T (shape - mean)."""
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != model.mean.shape:
        raise ShapeModelError(
            f"shape length {shape.shape} does not match model ({model.mean.shape})")
    return model.modes.T @ (shape - model.mean)


def reconstruct(model: ShapeModel, coefficients: np.ndarray) -> np.ndarray:
    """Shape vector mean + modes @ b."""
    b = np.asarray(coefficients, dtype=np.float64)
    if b.shape != (model.k,):
        raise ShapeModelError(
            f"coefficient length {b.shape} does not match mode count {model.k}")
    return model.mean + model.modes @ b


# -- container format ---------------------------------------------------------
#
# magic "CSSM", version u32, V u32, N u32, k u32, then little-endian
# float64 arrays: mean (3V), eigenvalues (N-1), explained (N-1),
# modes (3V x k, column major).

_MAGIC = b"CSSM"
_VERSION = 1


def save_shape_model(model: ShapeModel, path) -> None:
    n_coords = len(model.mean)
    if n_coords % 3 != 0:
        raise ShapeModelError("mean length is not a multiple of 3")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIII", _VERSION, n_coords // 3,
                            model.sample_count, model.k))
        f.write(model.mean.astype("<f8").tobytes())
        f.write(model.eigenvalues.astype("<f8").tobytes())
        f.write(model.explained.astype("<f8").tobytes())
        f.write(np.asfortranarray(model.modes.astype("<f8")).tobytes(order="F"))


def load_shape_model(path) -> ShapeModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ShapeModelError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        version, n_verts, n_samples, k = struct.unpack("<IIII", f.read(16))
        if version != _VERSION:
            raise ShapeModelError(f"unsupported container version {version}")
        n_coords = 3 * n_verts
        n_spec = n_samples - 1

        def read_f8(count):
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ShapeModelError("container truncated")
            return np.frombuffer(buf, dtype="<f8").copy()

        mean = read_f8(n_coords)
        eigenvalues = read_f8(n_spec)
        explained = read_f8(n_spec)
        modes = read_f8(n_coords * k).reshape((n_coords, k), order="F")
        if f.read(1):
            raise ShapeModelError("trailing bytes after container payload")
    return ShapeModel(
        mean=mean,
        modes=modes,
        eigenvalues=eigenvalues,
        explained=explained,
        k=k,
        sample_count=n_samples,
    )
