"""Binary STL reading and writing.

Binary layout: an 80 byte header, a little-endian uint32 triangle
count, then one 50 byte record per triangle (normal and three corners
as float32 triples plus a uint16 attribute). ASCII files are accepted
on load only. Coordinates are stored as float32; loading welds
coincident corners at 1e-6 mm and drops degenerate triangles.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .mesh import EmptyMeshError, TriMesh, triangle_normals

__all__ = ["StlParseError", "load_stl", "save_stl", "stl_bytes"]

_RECORD = 50
_HEADER = 80


class StlParseError(ValueError):
    """Raised for malformed STL data; the message names the byte offset."""


def stl_bytes(mesh: TriMesh) -> bytes:
    """The mesh as a binary STL blob (normals recomputed from winding)."""
    tris = mesh.triangles
    corners = mesh.vertices[tris].astype(np.float32)
    normals = triangle_normals(mesh).astype(np.float32)
    rec = np.zeros(
        len(tris),
        dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")],
    )
    rec["n"] = normals
    rec["v"] = corners
    header = b"cranioplan binary STL" + b" " * (_HEADER - 21)
    return header + struct.pack("<I", len(tris)) + rec.tobytes()


def save_stl(mesh: TriMesh, path) -> None:
    """Write the mesh as binary STL."""
    with open(path, "wb") as f:
        f.write(stl_bytes(mesh))


def load_stl(path, weld_tol: float = 1e-6) -> TriMesh:
    """Read a binary or ASCII STL file into a welded TriMesh."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER)
        if len(head) < _HEADER:
            raise StlParseError(
                f"file too short for an STL header: {len(head)} bytes (offset 0)")
        if head.lstrip().startswith(b"solid"):
            f.seek(0)
            data = f.read()
            try:
                text = data.decode("ascii", errors="strict")
            except UnicodeDecodeError:
                text = None  # binary file whose header happens to start with "solid"
            if text is not None and "endfacet" in text:
                return _parse_ascii(text, weld_tol)
            f.seek(_HEADER)
        count_bytes = f.read(4)
        if len(count_bytes) < 4:
            raise StlParseError(f"missing triangle count (offset {_HEADER})")
        (count,) = struct.unpack("<I", count_bytes)
        expected = _HEADER + 4 + count * _RECORD
        if size < expected:
            complete = (size - _HEADER - 4) // _RECORD
            offset = _HEADER + 4 + complete * _RECORD
            raise StlParseError(
                f"truncated binary STL: header declares {count} triangles but "
                f"record {complete + 1} is incomplete (offset {offset})")
        rec = np.fromfile(
            f,
            dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")],
            count=count,
        )
        if len(rec) != count:
            raise StlParseError(
                f"could not read {count} records (offset {_HEADER + 4})")
    corners = rec["v"].astype(np.float64)
    return _soup_to_mesh(corners, weld_tol)


def _parse_ascii(text: str, weld_tol: float) -> TriMesh:
    corners = []
    current = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("vertex"):
            parts = line.split()
            if len(parts) != 4:
                raise StlParseError(f"malformed vertex on line {lineno}")
            try:
                current.append([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise StlParseError(f"bad coordinate on line {lineno}") from exc
        elif line.startswith("endfacet"):
            if len(current) != 3:
                raise StlParseError(
                    f"facet ending on line {lineno} has {len(current)} vertices")
            corners.append(current)
            current = []
    if current:
        raise StlParseError("unterminated facet at end of file")
    if not corners:
        raise StlParseError("no facets found in ASCII STL")
    return _soup_to_mesh(np.array(corners, dtype=np.float64), weld_tol)


def _soup_to_mesh(corners: np.ndarray, weld_tol: float) -> TriMesh:
    try:
        return TriMesh.from_triangle_soup(corners, weld_tol=weld_tol)
    except EmptyMeshError as exc:
        raise StlParseError(str(exc)) from exc
