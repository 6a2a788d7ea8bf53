"""
Triangle mesh container and the per-vertex quantities the renderer needs.

TriMesh is immutable after construction. Vertex normals are area-weighted
(the unnormalized cross product of a face already carries twice its area),
and compute_vertex_normals_backward gives the exact adjoint used when pixel
losses flow back to vertex positions.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import trimesh

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TriMesh:
    positions: np.ndarray                  # (N, 3) float64
    faces: np.ndarray                      # (F, 3) int64
    vertex_normals: np.ndarray | None = None
    uvs: np.ndarray | None = None          # (N, 2) in [0, 1]^2
    normal_valid: np.ndarray | None = None  # (N,) False for isolated vertices

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.positions)):
            raise InvalidArgumentError("Face index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.num_faces == 0

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.positions[self.faces]

    def with_uvs(self, uvs: np.ndarray) -> "TriMesh":
        return replace(self, uvs=np.asarray(uvs, dtype=np.float64))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_vertices == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)


def face_cross(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (e1 x e2); length is twice the face area."""
    p = positions[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.positions, mesh.faces), axis=1)


def face_normals(mesh: TriMesh) -> np.ndarray:
    c = face_cross(mesh.positions, mesh.faces)
    n = np.linalg.norm(c, axis=1, keepdims=True)
    return c / np.maximum(n, 1e-300)


def _accumulate_vertex_sums(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    c = face_cross(positions, faces)
    sums = np.zeros_like(positions)
    for k in range(3):
        np.add.at(sums, faces[:, k], c)
    return sums


def compute_vertex_normals(mesh: TriMesh) -> TriMesh:
    """Area-weighted vertex normals; isolated vertices get a zero vector and normal_valid=False."""
    sums = _accumulate_vertex_sums(mesh.positions, mesh.faces)
    length = np.linalg.norm(sums, axis=1)
    valid = length > 0.0
    normals = np.zeros_like(sums)
    normals[valid] = sums[valid] / length[valid, None]
    if not valid.all():
        logger.debug(f"{int((~valid).sum())} isolated vertices left without a normal")
    return replace(mesh, vertex_normals=normals, normal_valid=valid)


def compute_vertex_normals_backward(mesh: TriMesh, grad_normals: np.ndarray) -> np.ndarray:
    """dL/d(positions) given dL/d(vertex normals)."""
    positions, faces = mesh.positions, mesh.faces
    sums = _accumulate_vertex_sums(positions, faces)
    length = np.linalg.norm(sums, axis=1)
    valid = length > 0.0
    n = np.zeros_like(sums)
    n[valid] = sums[valid] / length[valid, None]

    # d(u/|u|) = (I - n n^T) du / |u|
    g = np.asarray(grad_normals, dtype=np.float64)
    grad_sum = np.zeros_like(sums)
    proj = g - n * np.sum(n * g, axis=1, keepdims=True)
    grad_sum[valid] = proj[valid] / length[valid, None]

    gc = grad_sum[faces[:, 0]] + grad_sum[faces[:, 1]] + grad_sum[faces[:, 2]]
    p = positions[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    # (e1 x e2) . G  =  e1 . (e2 x G)  =  e2 . (G x e1)
    g_e1 = np.cross(e2, gc)
    g_e2 = np.cross(gc, e1)

    grad_pos = np.zeros_like(positions)
    np.add.at(grad_pos, faces[:, 1], g_e1)
    np.add.at(grad_pos, faces[:, 2], g_e2)
    np.add.at(grad_pos, faces[:, 0], -(g_e1 + g_e2))
    return grad_pos


def make_icosphere(subdivisions: int = 3, radius: float = 1.0,
                   center=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0)) -> TriMesh:
    """Icosphere with outward winding; `scale` turns it into an ellipsoid."""
    ico = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    positions = np.asarray(ico.vertices, dtype=np.float64) * np.asarray(scale, dtype=np.float64)
    positions = positions + np.asarray(center, dtype=np.float64)
    return compute_vertex_normals(TriMesh(positions, np.asarray(ico.faces, dtype=np.int64)))


def edge_face_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and how many faces use each."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    unique, counts = np.unique(edges, axis=0, return_counts=True)
    return unique, counts


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.is_empty:
        return False
    _, counts = edge_face_counts(mesh.faces)
    return bool(np.all(counts == 2))


def euler_characteristic(mesh: TriMesh) -> int:
    edges, _ = edge_face_counts(mesh.faces)
    used = np.unique(mesh.faces)
    return int(len(used) - len(edges) + mesh.num_faces)


def sample_surface(mesh: TriMesh, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted stratified surface samples.

    Faces are picked by inverting the cumulative area at stratified positions
    (one jittered sample per 1/count stratum), barycentrics by the square-root
    warp. Returns (points, face_ids).
    """
    if mesh.is_empty:
        raise InvalidArgumentError("Cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = face_areas(mesh)
    cdf = np.cumsum(areas)
    total = cdf[-1]
    strata = (np.arange(count) + rng.random(count)) / count * total
    face_ids = np.minimum(np.searchsorted(cdf, strata, side="right"), mesh.num_faces - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.triangles()[face_ids]
    points = ((1.0 - r1)[:, None] * tri[:, 0]
              + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
              + (r1 * r2)[:, None] * tri[:, 2])
    return points, face_ids
