"""Close the osteotomy gap after the equilibrium solve.

The cut removed a strip of vertices from the skull. Closing the gap
re-inserts those vertices into the deformed mesh, each displaced by a
lateral blend of the motions of its nearest retained neighbors on the
left and right gap edges. The output therefore has the full original
topology: watertight across the former gap, non-gap vertices untouched,
and an unopened gap reproduces the input skull exactly.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshError, TriMesh, mesh_edges

__all__ = ["bridge_gap"]


def bridge_gap(deformed_skull: TriMesh, osteotomy, template: TriMesh) -> TriMesh:
    """Rebuild the full skull surface over the osteotomy gap.

    ``deformed_skull`` is the cut mesh at equilibrium positions,
    ``osteotomy`` the cut bookkeeping, and ``template`` the uncut skull
    the cut was taken from.
    """
    kept = np.asarray(osteotomy.kept_indices)
    removed = np.asarray(osteotomy.removed_indices)
    if deformed_skull.num_vertices != len(kept):
        raise MeshError(
            f"deformed skull has {deformed_skull.num_vertices} vertices, "
            f"expected {len(kept)} kept by the osteotomy")
    if template.num_vertices != len(kept) + len(removed):
        raise MeshError(
            f"template has {template.num_vertices} vertices, expected "
            f"{len(kept) + len(removed)}")
    if len(removed) == 0:
        raise MeshError("osteotomy removed no vertices; nothing to bridge")

    disp = np.zeros((template.num_vertices, 3))
    disp[kept] = deformed_skull.vertices - osteotomy.mesh.vertices

    # anchors: retained vertices that bordered the removed strip
    removed_mask = np.zeros(template.num_vertices, dtype=bool)
    removed_mask[removed] = True
    edges = mesh_edges(template)
    mixed = removed_mask[edges[:, 0]] != removed_mask[edges[:, 1]]
    ends = edges[mixed].ravel()
    anchors = np.unique(ends[~removed_mask[ends]])

    x_mid = template.vertices[removed, 0].mean()
    left = anchors[template.vertices[anchors, 0] < x_mid]
    right = anchors[template.vertices[anchors, 0] >= x_mid]
    for name, ids in (("left", left), ("right", right)):
        if len(ids) == 0:
            raise MeshError(f"no gap boundary found on the {name} side")

    # pair strip vertices to boundary anchors running along the gap
    yz = template.vertices[:, 1:]
    li = cKDTree(yz[left]).query(yz[removed])[1]
    ri = cKDTree(yz[right]).query(yz[removed])[1]
    a_l, a_r = left[li], right[ri]
    x_l = template.vertices[a_l, 0]
    x_r = template.vertices[a_r, 0]
    span = x_r - x_l
    t = np.where(np.abs(span) < 1e-9, 0.5,
                 (template.vertices[removed, 0] - x_l) / np.where(span == 0, 1.0, span))
    t = np.clip(t, 0.0, 1.0)[:, None]
    disp[removed] = (1.0 - t) * disp[a_l] + t * disp[a_r]

    out = template.vertices + disp
    out[kept] = deformed_skull.vertices  # retained bone is preserved bit for bit
    return TriMesh(out, template.triangles, template.labels)
