"""
Soft silhouette: a coverage image with gradients w.r.t. vertex positions.

Each pixel gets sigmoid(sharpness * signed distance) to the nearest outer
contour edge in screen space, signed positive on covered pixels. Contour
edges are mesh edges between a front- and a back-facing face (or boundary
edges) that lie on the border of the hard mask. Pixels farther than the
sigmoid's saturation band take the hard mask value directly.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from camera import Camera, project_points
from errors import InvalidArgumentError
from image_io import RasterImage
from mesh import TriMesh, face_cross
from rasterizer import GBuffer, rasterize

logger = logging.getLogger(__name__)

DEFAULT_SHARPNESS = 2.0          # per pixel
SATURATION = 24.0                # sigmoid argument treated as fully saturated
_PIXEL_CHUNK = 4096


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def contour_edges(mesh: TriMesh, camera: Camera) -> np.ndarray:
    """(E, 2) vertex pairs of edges where facing flips, plus boundary edges."""
    if mesh.is_empty:
        return np.zeros((0, 2), dtype=np.int64)
    faces = mesh.faces
    to_eye = camera.position - mesh.positions[faces[:, 0]]
    front = np.einsum("ij,ij->i", face_cross(mesh.positions, faces), to_eye) > 0.0

    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    facing = np.tile(front, 3).astype(np.float64)
    edges = np.sort(directed, axis=1)
    unique, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    front_count = np.bincount(inverse, weights=facing, minlength=len(unique))
    contour = (counts == 1) | ((front_count > 0) & (front_count < counts))
    return unique[contour]


def _on_mask_border(xy: np.ndarray, depth: np.ndarray, mask: np.ndarray, gbuffer_depth: np.ndarray,
                    edges: np.ndarray, depth_eps: float) -> np.ndarray:
    """Keep edges whose midpoint separates covered from uncovered pixels and is not hidden."""
    h, w = mask.shape
    a, b = xy[edges[:, 0]], xy[edges[:, 1]]
    mid = 0.5 * (a + b)
    seg = b - a
    length = np.linalg.norm(seg, axis=1)
    ok = length > 1e-12
    normal = np.stack([-seg[:, 1], seg[:, 0]], axis=1) / np.where(ok, length, 1.0)[:, None]

    def covered(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        col = np.floor(points[:, 0]).astype(np.int64)
        row = np.floor(points[:, 1]).astype(np.int64)
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        c, r = np.clip(col, 0, w - 1), np.clip(row, 0, h - 1)
        return inside & mask[r, c], np.where(inside & mask[r, c], gbuffer_depth[r, c], np.inf)

    side_a, depth_a = covered(mid + normal)
    side_b, depth_b = covered(mid - normal)
    border = side_a != side_b
    surface_depth = np.where(side_a, depth_a, depth_b)
    edge_depth = 0.5 * (depth[edges[:, 0]] + depth[edges[:, 1]])
    visible = edge_depth <= surface_depth + depth_eps
    return ok & border & visible


@dataclass(frozen=True, eq=False)
class SoftSilhouette:
    image: RasterImage
    sharpness: float
    mask: np.ndarray             # hard mask the sign comes from
    band_pixels: np.ndarray      # flat indices with a soft value
    edge_a: np.ndarray           # nearest edge endpoints (vertex ids) per band pixel
    edge_b: np.ndarray
    edge_u: np.ndarray           # closest-point parameter on the segment
    direction: np.ndarray        # unit (pixel - closest point), zero at distance 0
    sign: np.ndarray
    jacobian: np.ndarray         # (N, 2, 3) screen Jacobian per vertex

    def backward(self, grad_image: np.ndarray) -> np.ndarray:
        """dL/d(vertex positions) from dL/d(soft mask image)."""
        grad_image = np.asarray(grad_image, dtype=np.float64)
        if grad_image.shape[:2] != self.mask.shape:
            raise InvalidArgumentError(
                f"Silhouette gradient has shape {grad_image.shape}, expected {self.mask.shape}"
            )
        grad_pos = np.zeros((len(self.jacobian), 3))
        if len(self.band_pixels) == 0:
            return grad_pos
        g = grad_image.reshape(-1)[self.band_pixels]
        v = self.image.plane.reshape(-1)[self.band_pixels]
        g_dist = g * self.sharpness * self.sign * v * (1.0 - v)
        # d dist / d a = -(1 - u) r,  d dist / d b = -u r
        g_a = -(g_dist * (1.0 - self.edge_u))[:, None] * self.direction
        g_b = -(g_dist * self.edge_u)[:, None] * self.direction
        np.add.at(grad_pos, self.edge_a, np.einsum("pi,pij->pj", g_a, self.jacobian[self.edge_a]))
        np.add.at(grad_pos, self.edge_b, np.einsum("pi,pij->pj", g_b, self.jacobian[self.edge_b]))
        return grad_pos


def soft_silhouette(mesh: TriMesh, camera: Camera, sharpness: float = DEFAULT_SHARPNESS,
                    gbuffer: GBuffer | None = None) -> SoftSilhouette:
    if not sharpness > 0.0:
        raise InvalidArgumentError(f"sharpness must be positive, got {sharpness}")
    gbuffer = gbuffer if gbuffer is not None else rasterize(mesh, camera)
    mask = gbuffer.mask
    h, w = mask.shape
    values = mask.astype(np.float64).reshape(-1)
    proj = project_points(camera, mesh.positions)
    empty = np.zeros(0, dtype=np.int64)

    def done(band=empty, a=empty, b=empty, u=np.zeros(0), r=np.zeros((0, 2)), sign=np.zeros(0)):
        return SoftSilhouette(RasterImage(values.reshape(h, w)), float(sharpness), mask, band,
                              a, b, u, r, sign, proj.jacobian)

    if mesh.is_empty or not mask.any():
        return done()

    edges = contour_edges(mesh, camera)
    keep = _on_mask_border(proj.xy, proj.depth, mask, gbuffer.depth, edges, 0.02 * camera.distance)
    keep &= proj.in_front[edges].all(axis=1)
    edges = edges[keep]
    if len(edges) == 0:
        logger.warning("No visible contour edges; soft silhouette falls back to the hard mask")
        return done()

    # pixels within the saturation band of the mask border
    band_px = SATURATION / sharpness + 1.5
    dist_in = ndimage.distance_transform_edt(mask)
    dist_out = ndimage.distance_transform_edt(~mask)
    near = np.where(mask, dist_in, dist_out) <= band_px + 1.0
    band = np.flatnonzero(near.reshape(-1))

    cols = band % w + 0.5
    rows = band // w + 0.5
    q = np.stack([cols, rows], axis=1)
    a, b = proj.xy[edges[:, 0]], proj.xy[edges[:, 1]]
    seg = b - a
    seg_len2 = np.maximum(np.einsum("ij,ij->i", seg, seg), 1e-300)

    best_d = np.full(len(band), np.inf)
    best_e = np.zeros(len(band), dtype=np.int64)
    best_u = np.zeros(len(band))
    for start in range(0, len(band), _PIXEL_CHUNK):
        block = q[start:start + _PIXEL_CHUNK]
        rel = block[:, None, :] - a[None, :, :]
        u = np.clip(np.einsum("pej,ej->pe", rel, seg) / seg_len2[None, :], 0.0, 1.0)
        diff = rel - u[..., None] * seg[None, :, :]
        d2 = np.einsum("pej,pej->pe", diff, diff)
        e = np.argmin(d2, axis=1)
        rows_idx = np.arange(len(block))
        best_d[start:start + len(block)] = np.sqrt(d2[rows_idx, e])
        best_e[start:start + len(block)] = e
        best_u[start:start + len(block)] = u[rows_idx, e]

    closest = a[best_e] + best_u[:, None] * seg[best_e]
    diff = q - closest
    direction = np.where(best_d[:, None] > 0.0, diff / np.maximum(best_d, 1e-300)[:, None], 0.0)
    sign = np.where(mask.reshape(-1)[band], 1.0, -1.0)
    values[band] = _sigmoid(sharpness * sign * best_d)
    logger.debug(f"Soft silhouette: {len(edges)} contour edges, {len(band)} band pixels")
    return done(band, edges[best_e, 0], edges[best_e, 1], best_u, direction, sign)
