"""Minimal binary glTF (.glb) export for triangle meshes.

One buffer, one mesh, one primitive: float32 positions and uint32
indices. Just enough of the 2.0 container format for a viewer to
render the surface; no materials, animations, or scene graph beyond a
single node.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .mesh import TriMesh

__all__ = ["mesh_to_glb"]

_MAGIC = 0x46546C67  # 'glTF'
_CHUNK_JSON = 0x4E4F534A
_CHUNK_BIN = 0x004E4942


def _pad(blob: bytes, filler: bytes) -> bytes:
    remainder = len(blob) % 4
    return blob + filler * ((4 - remainder) % 4)


def mesh_to_glb(mesh: TriMesh) -> bytes:
    positions = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    indices = np.ascontiguousarray(mesh.triangles, dtype="<u4").ravel()
    pos_blob = positions.tobytes()
    idx_blob = indices.tobytes()
    # float32 triples and uint32 scalars are both 4-byte aligned already
    binary = pos_blob + idx_blob

    document = {
        "asset": {"version": "2.0", "generator": "cranioplan"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{"primitives": [
            {"attributes": {"POSITION": 0}, "indices": 1, "mode": 4},
        ]}],
        "accessors": [
            {
                "bufferView": 0,
                "componentType": 5126,
                "count": int(len(positions)),
                "type": "VEC3",
                "min": [float(v) for v in positions.min(axis=0)],
                "max": [float(v) for v in positions.max(axis=0)],
            },
            {
                "bufferView": 1,
                "componentType": 5125,
                "count": int(len(indices)),
                "type": "SCALAR",
            },
        ],
        "bufferViews": [
            {"buffer": 0, "byteOffset": 0, "byteLength": len(pos_blob),
             "target": 34962},
            {"buffer": 0, "byteOffset": len(pos_blob),
             "byteLength": len(idx_blob), "target": 34963},
        ],
        "buffers": [{"byteLength": len(binary)}],
    }
    json_blob = _pad(json.dumps(document, separators=(",", ":"),
                                sort_keys=True).encode(), b" ")
    binary = _pad(binary, b"\x00")

    total = 12 + 8 + len(json_blob) + 8 + len(binary)
    return b"".join([
        struct.pack("<III", _MAGIC, 2, total),
        struct.pack("<II", len(json_blob), _CHUNK_JSON), json_blob,
        struct.pack("<II", len(binary), _CHUNK_BIN), binary,
    ])
