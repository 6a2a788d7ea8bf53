"""
Signed distance fields for analytic primitives and for triangle meshes.

Convention: negative inside, positive outside, world units.
The ellipsoid distance follows the robust bisection formulation for the
closest point on an ellipsoid (sorted semi-axes, first-octant reduction);
the mesh-derived field takes its sign from a 3-ray parity vote and its
magnitude from an exact nearest-triangle query.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from errors import InvalidArgumentError
from mesh import TriMesh

logger = logging.getLogger(__name__)

_BISECT_ITERATIONS = 200

# Three fixed, non-axis-aligned ray directions for the parity vote
_PARITY_DIRECTIONS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.8728715609439696, -0.4364357804719848, 0.2182178902359924],
])


@dataclass(frozen=True)
class Sphere:
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgumentError("Sphere radius must be positive")

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Capsule:
    a: tuple = (0.0, -0.5, 0.0)
    b: tuple = (0.0, 0.5, 0.0)
    radius: float = 0.5

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgumentError("Capsule radius must be positive")

    def distance(self, points: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.a, dtype=np.float64), np.asarray(self.b, dtype=np.float64)
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(points.shape[:-1]) if denom == 0.0 else np.clip((points - a) @ ab / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(points - closest, axis=-1) - self.radius


def _bisect_root(r: np.ndarray, z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Root s of sum_i (r_i z_i / (s + r_i))^2 = 1, vectorized over rows.

    r: (M, D) with the last column 1 (axes normalized by the smallest),
    z: (M, D) positive, g: (M,) = |z|^2 - 1.
    """
    n = r * z
    s0 = z[:, -1] - 1.0
    s1 = np.where(g < 0.0, 0.0, np.linalg.norm(n, axis=1) - 1.0)
    for _ in range(_BISECT_ITERATIONS):
        s = 0.5 * (s0 + s1)
        ratio = n / (s[:, None] + r)
        f = np.sum(ratio * ratio, axis=1) - 1.0
        s0 = np.where(f > 0.0, s, s0)
        s1 = np.where(f < 0.0, s, s1)
        done = f == 0.0
        s0 = np.where(done, s, s0)
        s1 = np.where(done, s, s1)
    return 0.5 * (s0 + s1)


def _ellipse_distance_2d(e0: float, e1: float, y0: float, y1: float) -> float:
    """Distance from a first-quadrant point to the ellipse with e0 >= e1."""
    if y1 > 0.0:
        if y0 > 0.0:
            z = np.array([[y0 / e0, y1 / e1]])
            g = z[:, 0] ** 2 + z[:, 1] ** 2 - 1.0
            if g[0] == 0.0:
                return 0.0
            r0 = (e0 / e1) ** 2
            s = _bisect_root(np.array([[r0, 1.0]]), z, g)[0]
            x0 = r0 * y0 / (s + r0)
            x1 = y1 / (s + 1.0)
            return float(np.hypot(x0 - y0, x1 - y1))
        return abs(y1 - e1)
    numer0 = e0 * y0
    denom0 = e0 * e0 - e1 * e1
    if numer0 < denom0:
        xde0 = numer0 / denom0
        x0 = e0 * xde0
        x1 = e1 * np.sqrt(max(0.0, 1.0 - xde0 * xde0))
        return float(np.hypot(x0 - y0, x1))
    return abs(y0 - e0)


def _ellipsoid_distance_degenerate(e: np.ndarray, y: np.ndarray) -> float:
    """Scalar path for first-octant points with at least one zero coordinate."""
    e0, e1, e2 = e
    y0, y1, y2 = y
    if y2 > 0.0:
        if y1 > 0.0:
            # y0 == 0
            return _ellipse_distance_2d(e1, e2, y1, y2)
        if y0 > 0.0:
            return _ellipse_distance_2d(e0, e2, y0, y2)
        return abs(y2 - e2)
    denom0 = e0 * e0 - e2 * e2
    denom1 = e1 * e1 - e2 * e2
    numer0 = e0 * y0
    numer1 = e1 * y1
    if numer0 < denom0 and numer1 < denom1:
        xde0 = numer0 / denom0
        xde1 = numer1 / denom1
        discr = 1.0 - xde0 * xde0 - xde1 * xde1
        if discr > 0.0:
            x0, x1, x2 = e0 * xde0, e1 * xde1, e2 * np.sqrt(discr)
            return float(np.sqrt((x0 - y0) ** 2 + (x1 - y1) ** 2 + x2 * x2))
    return _ellipse_distance_2d(e0, e1, y0, y1)


@dataclass(frozen=True)
class Ellipsoid:
    axes: tuple = (1.0, 1.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.axes) <= 0:
            raise InvalidArgumentError("Ellipsoid semi-axes must be positive")

    def distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        flat = np.abs(pts.reshape(-1, 3) - np.asarray(self.center))
        order = np.argsort(-np.asarray(self.axes), kind="stable")
        e = np.asarray(self.axes, dtype=np.float64)[order]
        y = flat[:, order]

        inside = np.sum((y / e) ** 2, axis=1) < 1.0
        dist = np.zeros(len(y))
        general = np.all(y > 0.0, axis=1)

        if np.any(general):
            yg = y[general]
            z = yg / e
            g = np.sum(z * z, axis=1) - 1.0
            r = np.array([(e[0] / e[2]) ** 2, (e[1] / e[2]) ** 2, 1.0])
            s = _bisect_root(np.broadcast_to(r, z.shape), z, g)
            x = r * yg / (s[:, None] + r)
            dg = np.linalg.norm(x - yg, axis=1)
            dg[g == 0.0] = 0.0
            dist[general] = dg
        for idx in np.flatnonzero(~general):
            dist[idx] = _ellipsoid_distance_degenerate(e, y[idx])

        signed = np.where(inside, -dist, dist)
        return signed.reshape(pts.shape[:-1])


class MeshSdf:
    """Signed distance to a closed triangle mesh.

    Magnitude: exact nearest-triangle distance through the octree.
    Sign: parity of ray crossings along three fixed directions, majority vote.
    """

    def __init__(self, mesh: TriMesh, max_leaf: int = 8, threads: int = 1):
        from octree import build_octree
        if mesh.is_empty:
            raise InvalidArgumentError("MeshSdf needs a non-empty mesh")
        self.mesh = mesh
        self.octree = build_octree(mesh, max_leaf)
        self.threads = max(1, int(threads))

    def distance(self, points: np.ndarray) -> np.ndarray:
        from octree import closest_points
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        magnitude, _, _ = closest_points(self.octree, self.mesh, flat, threads=self.threads)
        inside = self.inside(flat)
        return np.where(inside, -magnitude, magnitude).reshape(pts.shape[:-1])

    def inside(self, points: np.ndarray) -> np.ndarray:
        votes = np.zeros(len(points), dtype=np.int64)
        for direction in _PARITY_DIRECTIONS:
            votes += _crossing_parity(self.mesh, points, direction, self.threads)
        return votes >= 2


def _crossing_parity(mesh: TriMesh, points: np.ndarray, direction: np.ndarray, threads: int,
                     chunk: int = 4096) -> np.ndarray:
    """1 where a ray from the point along `direction` crosses the surface an odd number of times."""
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    usable = np.abs(det) > 1e-14
    v0, e1, pvec, det = v0[usable], e1[usable], pvec[usable], det[usable]
    e2_usable = e2[usable]
    inv_det = 1.0 / det

    def run(block: np.ndarray) -> np.ndarray:
        tvec = block[:, None, :] - v0[None, :, :]
        u = np.einsum("ptj,tj->pt", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = (qvec @ direction) * inv_det
        t = np.einsum("ptj,tj->pt", qvec, e2_usable) * inv_det
        hit = (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
        return (hit.sum(axis=1) % 2).astype(np.int64)

    # keep each block's (points x triangles) temporaries bounded
    rows = max(1, min(chunk, 1_000_000 // max(1, len(v0))))
    blocks = [points[i:i + rows] for i in range(0, len(points), rows)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def eval_sdf_primitive(shape, point) -> np.ndarray | float:
    """Signed distance of `shape` at one point (returns a float) or at an (..., 3) array."""
    pts = np.asarray(point, dtype=np.float64)
    values = shape.distance(pts.reshape(-1, 3)).reshape(pts.shape[:-1])
    return float(values) if values.ndim == 0 else values
