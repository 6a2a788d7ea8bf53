"""
Octree over mesh triangles for ray casting and nearest-surface queries.

Every triangle is stored in each leaf whose box overlaps the triangle's
bounding box. Ray hits use one shared Moller-Trumbore routine for octree and
brute-force paths, so both return the same (t, face) bit for bit; ties at
equal t go to the lower face id.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from errors import InvalidArgumentError
from mesh import TriMesh

logger = logging.getLogger(__name__)

RAY_EPSILON = 1e-9
DEFAULT_MAX_DEPTH = 10
_SLAB_PAD = 1e-9


@dataclass(frozen=True, eq=False)
class Octree:
    box_min: np.ndarray         # (K, 3)
    box_max: np.ndarray         # (K, 3)
    children: np.ndarray        # (K, 8), -1 for leaves
    leaf_triangles: list        # K entries; int arrays for leaves, None for inner nodes
    max_leaf: int
    max_depth: int
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.box_min)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.children[:, 0] < 0)


@dataclass(frozen=True)
class RayHit:
    t: float
    face: int
    point: np.ndarray


def dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def ray_triangle_t(origin: np.ndarray, direction: np.ndarray,
                   v0: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Hit distance per triangle, +inf on a miss or behind RAY_EPSILON."""
    pvec = cross3(np.broadcast_to(direction, e2.shape), e2)
    det = dot3(e1, pvec)
    ok = np.abs(det) > 1e-300
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = dot3(tvec, pvec) * inv_det
    qvec = cross3(tvec, e1)
    v = dot3(np.broadcast_to(direction, qvec.shape), qvec) * inv_det
    t = dot3(e2, qvec) * inv_det
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > RAY_EPSILON)
    return np.where(hit, t, np.inf)


def _tri_bboxes(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    tri = mesh.triangles()
    return tri.min(axis=1), tri.max(axis=1)


def build_octree(mesh: TriMesh, max_leaf: int = 8, max_depth: int = DEFAULT_MAX_DEPTH) -> Octree:
    if mesh.is_empty:
        raise InvalidArgumentError("Cannot build an octree over an empty mesh")
    if max_leaf < 1:
        raise InvalidArgumentError(f"max_leaf must be >= 1, got {max_leaf}")

    tmin, tmax = _tri_bboxes(mesh)
    lo, hi = tmin.min(axis=0), tmax.max(axis=0)
    pad = 1e-9 * max(1.0, float(np.max(hi - lo)))
    lo, hi = lo - pad, hi + pad

    box_min, box_max, children, leaf_tris = [], [], [], []

    def add_node(bmin, bmax) -> int:
        box_min.append(bmin)
        box_max.append(bmax)
        children.append(np.full(8, -1, dtype=np.int64))
        leaf_tris.append(None)
        return len(box_min) - 1

    root = add_node(lo, hi)
    stack = [(root, np.arange(mesh.num_faces), 0)]
    while stack:
        node, tris, depth = stack.pop()
        if len(tris) <= max_leaf or depth >= max_depth:
            leaf_tris[node] = tris
            continue
        bmin, bmax = box_min[node], box_max[node]
        mid = 0.5 * (bmin + bmax)
        for octant in range(8):
            upper = np.array([(octant >> a) & 1 for a in range(3)], dtype=bool)
            cmin = np.where(upper, mid, bmin)
            cmax = np.where(upper, bmax, mid)
            overlap = np.all((tmin[tris] <= cmax) & (tmax[tris] >= cmin), axis=1)
            child = add_node(cmin, cmax)
            children[node][octant] = child
            stack.append((child, tris[overlap], depth + 1))

    tri = mesh.triangles()
    octree = Octree(
        box_min=np.array(box_min), box_max=np.array(box_max), children=np.array(children),
        leaf_triangles=leaf_tris, max_leaf=max_leaf, max_depth=max_depth,
        tri_v0=tri[:, 0].copy(), tri_e1=tri[:, 1] - tri[:, 0], tri_e2=tri[:, 2] - tri[:, 0],
    )
    logger.debug(f"Octree: {octree.num_nodes} nodes, {len(octree.leaves())} leaves for {mesh.num_faces} faces")
    return octree


def _slab(origin, inv_dir, bmin, bmax) -> tuple[float, float]:
    with np.errstate(invalid="ignore"):
        t1 = (bmin - origin) * inv_dir
        t2 = (bmax - origin) * inv_dir
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    return float(np.max(np.minimum(t1, t2))), float(np.min(np.maximum(t1, t2)))


def _pick(t: np.ndarray, faces: np.ndarray) -> tuple[float, int]:
    best = float(t.min()) if len(t) else np.inf
    if not np.isfinite(best):
        return np.inf, -1
    return best, int(faces[t == best].min())


def ray_intersect(octree: Octree, mesh: TriMesh, origin, direction) -> RayHit | None:
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidArgumentError("Ray direction must be unit length")
    with np.errstate(divide="ignore"):
        inv_dir = 1.0 / direction

    best_t, best_face = np.inf, -1
    stack = [0]
    while stack:
        node = stack.pop()
        t_near, t_far = _slab(origin, inv_dir, octree.box_min[node] - _SLAB_PAD, octree.box_max[node] + _SLAB_PAD)
        if t_near > t_far or t_far < RAY_EPSILON or t_near > best_t:
            continue
        if octree.children[node, 0] < 0:
            tris = octree.leaf_triangles[node]
            if len(tris) == 0:
                continue
            t = ray_triangle_t(origin, direction, octree.tri_v0[tris], octree.tri_e1[tris], octree.tri_e2[tris])
            t_hit, face = _pick(t, tris)
            if t_hit < best_t or (t_hit == best_t and face < best_face):
                best_t, best_face = t_hit, face
        else:
            stack.extend(int(c) for c in octree.children[node][::-1])
    if best_face < 0:
        return None
    return RayHit(best_t, best_face, origin + best_t * direction)


def brute_force_ray_intersect(mesh: TriMesh, origin, direction) -> RayHit | None:
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    tri = mesh.triangles()
    t = ray_triangle_t(origin, direction, tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    t_hit, face = _pick(t, np.arange(mesh.num_faces))
    if face < 0:
        return None
    return RayHit(t_hit, face, origin + t_hit * direction)


# --- nearest surface point ------------------------------------------------------

def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, elementwise over leading dims (Voronoi regions)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = dot3(ab, ap), dot3(ac, ap)
    bp = p - b
    d3, d4 = dot3(ab, bp), dot3(ac, bp)
    cp = p - c
    d5, d6 = dot3(ab, cp), dot3(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    denom = va + vb + vc
    v_face = safe(vb, denom)
    w_face = safe(vc, denom)
    on_face = a + ab * v_face[..., None] + ac * w_face[..., None]
    on_ab = a + ab * safe(d1, d1 - d3)[..., None]
    on_ac = a + ac * safe(d2, d2 - d6)[..., None]
    on_bc = b + (c - b) * safe(d4 - d3, (d4 - d3) + (d5 - d6))[..., None]

    out = on_face
    # later assignments win; apply in reverse priority
    for mask, value in ((in_bc, on_bc), (in_ac, on_ac), (in_c, c), (in_ab, on_ab), (in_b, b), (in_a, a)):
        out = np.where(mask[..., None], value, out)
    return out


def _box_distance(points: np.ndarray, bmin: np.ndarray, bmax: np.ndarray) -> np.ndarray:
    d = np.maximum(np.maximum(bmin - points, points - bmax), 0.0)
    return np.sqrt(dot3(d, d))


def _closest_block(octree: Octree, mesh: TriMesh, queries: np.ndarray,
                   vertex_tree: cKDTree) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    upper, _ = vertex_tree.query(queries)
    best = upper * (1.0 + 1e-12) + 1e-15
    best_face = np.full(len(queries), -1, dtype=np.int64)
    best_point = np.zeros_like(queries)
    tri = mesh.triangles()
    for leaf in octree.leaves():
        tris = octree.leaf_triangles[leaf]
        if len(tris) == 0:
            continue
        active = np.flatnonzero(_box_distance(queries, octree.box_min[leaf], octree.box_max[leaf]) <= best)
        if len(active) == 0:
            continue
        p = queries[active][:, None, :]
        corners = tri[tris]
        cp = closest_point_on_triangles(p, corners[None, :, 0], corners[None, :, 1], corners[None, :, 2])
        diff = cp - p
        dist = np.sqrt(dot3(diff, diff))
        order = np.argmin(dist, axis=1)
        d_min = dist[np.arange(len(active)), order]
        face = tris[order]
        cur = best_face[active]
        better = (d_min < best[active]) | ((d_min == best[active]) & ((cur < 0) | (face < cur)))
        sel = active[better]
        best[sel] = d_min[better]
        best_face[sel] = face[better]
        best_point[sel] = cp[np.arange(len(active)), order][better]
    return best, best_face, best_point


def closest_points(octree: Octree, mesh: TriMesh, queries: np.ndarray, threads: int = 1,
                   chunk: int = 2048) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact distance, face id and point of the nearest surface point for each query."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    # only vertices referenced by a face bound the surface distance
    vertex_tree = cKDTree(mesh.positions[np.unique(mesh.faces)])
    blocks = [queries[i:i + chunk] for i in range(0, len(queries), chunk)]
    if not blocks:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _closest_block(octree, mesh, b, vertex_tree), blocks))
    else:
        parts = [_closest_block(octree, mesh, b, vertex_tree) for b in blocks]
    return (np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]))


def brute_force_closest(mesh: TriMesh, queries: np.ndarray) -> np.ndarray:
    tri = mesh.triangles()
    p = np.asarray(queries, dtype=np.float64)[:, None, :]
    cp = closest_point_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
    diff = cp - p
    return np.sqrt(dot3(diff, diff)).min(axis=1)
