"""
Marching Tetrahedra over a deformed tet grid, with its exact backward pass.

A surface vertex is created on every tet edge whose endpoint signs differ,
at the linear zero crossing

    v = (p_a * s_b - p_b * s_a) / (s_b - s_a)

Edges are shared between tets through a global edge key, so neighbouring
tets reuse the same vertex and the surface is closed wherever the zero set
stays inside the grid. Triangles are wound so their normal points from the
inside corners (sdf < 0) to the outside ones.
"""

import logging
from dataclasses import dataclass

import numpy as np

from mesh import TriMesh
from tet_grid import DmtetParams, TetGrid

logger = logging.getLogger(__name__)

DEGENERATE_AREA_FACTOR = 1e-12

# single-corner case: edges from the lone corner; two-two case: quad around the cut
_SINGLE_EDGES = np.array([[0, 1], [0, 2], [0, 3]])
_QUAD_EDGES = np.array([[0, 2], [0, 3], [1, 3], [1, 2]])


@dataclass(frozen=True, eq=False)
class SurfaceExtraction:
    """Extracted mesh plus the generating edge of every surface vertex."""
    mesh: TriMesh
    edge_a: np.ndarray          # (M,) grid vertex with sdf < 0
    edge_b: np.ndarray          # (M,) grid vertex with sdf >= 0
    face_tets: np.ndarray       # (F,) generating tet per face

    @property
    def is_empty(self) -> bool:
        return self.mesh.is_empty


def _empty(num_grid_vertices: int) -> SurfaceExtraction:
    empty = np.zeros(0, dtype=np.int64)
    return SurfaceExtraction(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), empty, empty, empty)


def extract_surface(grid: TetGrid, params: DmtetParams) -> SurfaceExtraction:
    params.validate(grid)
    positions = params.deformed_positions(grid)
    sdf = params.sdf
    inside = sdf < 0.0

    occ = inside[grid.tets]
    count = occ.sum(axis=1)
    valid = (count > 0) & (count < 4)
    if not np.any(valid):
        return _empty(grid.num_vertices)

    tet_ids = np.flatnonzero(valid)
    tets = grid.tets[valid]
    occ = occ[valid]
    count = count[valid]

    # order corners: the lone corner first (1 or 3 inside), inside pair first (2 inside)
    key = np.where((count == 3)[:, None], occ, ~occ).astype(np.int64)
    perm = np.argsort(key, axis=1, kind="stable")
    corners = np.take_along_axis(tets, perm, axis=1)

    single = count != 2
    n_grid = grid.num_vertices

    def edge_keys(c: np.ndarray, pattern: np.ndarray) -> np.ndarray:
        a = c[:, pattern[:, 0]]
        b = c[:, pattern[:, 1]]
        return np.minimum(a, b) * n_grid + np.maximum(a, b)

    single_keys = edge_keys(corners[single], _SINGLE_EDGES)          # (S, 3)
    quad_keys = edge_keys(corners[~single], _QUAD_EDGES)              # (Q, 4)

    tri_keys = np.concatenate([
        single_keys,
        quad_keys[:, [0, 1, 2]],
        quad_keys[:, [0, 2, 3]],
    ])
    tri_tet_rows = np.concatenate([
        np.flatnonzero(single),
        np.flatnonzero(~single),
        np.flatnonzero(~single),
    ])
    # deterministic order: by generating tet, then quad half
    half = np.concatenate([np.zeros(len(single_keys)), np.zeros(len(quad_keys)), np.ones(len(quad_keys))])
    order = np.lexsort((half, tri_tet_rows))
    tri_keys = tri_keys[order]
    tri_tet_rows = tri_tet_rows[order]

    unique_keys, inverse = np.unique(tri_keys.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)

    lo = unique_keys // n_grid
    hi = unique_keys % n_grid
    edge_a = np.where(inside[lo], lo, hi)
    edge_b = np.where(inside[lo], hi, lo)
    s_a, s_b = sdf[edge_a], sdf[edge_b]
    denom = s_b - s_a
    verts = (positions[edge_a] * s_b[:, None] - positions[edge_b] * s_a[:, None]) / denom[:, None]

    # wind each face so its normal points from inside corners to outside corners
    row_tets = tets[tri_tet_rows]
    row_occ = occ[tri_tet_rows]
    p = positions[row_tets]
    n_in = row_occ.sum(axis=1, keepdims=True)
    mean_in = np.sum(p * row_occ[:, :, None], axis=1) / n_in
    mean_out = np.sum(p * (~row_occ)[:, :, None], axis=1) / (4 - n_in)
    tri = verts[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normal, mean_out - mean_in) < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    lo_b, hi_b = grid.bounds
    scale = float(np.max(hi_b - lo_b))
    area = 0.5 * np.linalg.norm(normal, axis=1)
    keep = area >= DEGENERATE_AREA_FACTOR * scale * scale
    if not np.all(keep):
        logger.debug(f"Dropped {int((~keep).sum())} degenerate faces")
    faces = faces[keep]
    face_tets = tet_ids[tri_tet_rows[keep]]

    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = TriMesh(verts[used], remap[faces])
    return SurfaceExtraction(mesh, edge_a[used], edge_b[used], face_tets)


def marching_tetrahedra(grid: TetGrid, params: DmtetParams) -> TriMesh:
    """Surface at sdf = 0 of the deformed grid; empty when the sdf has one sign."""
    return extract_surface(grid, params).mesh


def marching_tetrahedra_backward(grid: TetGrid, params: DmtetParams, extraction: SurfaceExtraction,
                                 grad_vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dL/dsdf and dL/ddeform from dL/d(surface vertex positions)."""
    grad_sdf = np.zeros(grid.num_vertices)
    grad_deform = np.zeros((grid.num_vertices, 3))
    if extraction.is_empty:
        return grad_sdf, grad_deform

    positions = params.deformed_positions(grid)
    a, b = extraction.edge_a, extraction.edge_b
    s_a, s_b = params.sdf[a], params.sdf[b]
    denom = s_b - s_a
    g = np.asarray(grad_vertices, dtype=np.float64)
    diff = positions[a] - positions[b]
    g_dot = np.einsum("ij,ij->i", g, diff) / (denom * denom)

    np.add.at(grad_sdf, a, g_dot * s_b)
    np.add.at(grad_sdf, b, -g_dot * s_a)
    np.add.at(grad_deform, a, g * (s_b / denom)[:, None])
    np.add.at(grad_deform, b, g * (-s_a / denom)[:, None])
    return grad_sdf, grad_deform
