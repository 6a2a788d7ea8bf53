"""
Deterministic software rasterizer and its backward pass.

Every pixel centre shoots one ray from the camera; candidate (face, pixel)
pairs come from the projected bounding box of each face and are resolved
with a single Moller-Trumbore routine shared with the brute-force oracle.
The nearest hit wins, ties go to the lower face id. Ray-cast barycentrics
are perspective-correct by construction.

Backward: pixel-to-face assignment is held fixed. Barycentrics and ray
depth are differentiated through the ray/plane intersection

    o + t d = p0 + b1 (p1 - p0) + b2 (p2 - p0)
    d[b1, b2, t] = -M^-1 sum_k b_k dp_k,   M = [e1, e2, -d]

so depth and normal losses give exact vertex gradients away from
visibility changes. Silhouette gradients come from silhouette.py.
"""

import logging
from dataclasses import dataclass

import numpy as np

from camera import Camera, pixel_rays, project_points
from errors import InvalidArgumentError
from image_io import RasterImage
from mesh import TriMesh, compute_vertex_normals, compute_vertex_normals_backward
from octree import cross3, dot3

logger = logging.getLogger(__name__)

HIT_EPSILON = 1e-9
MAX_PAIRS_PER_CHUNK = 2_000_000
LANDMARK_RADIUS_PX = 3.0
LANDMARK_OCCLUSION_EPS = 0.05
UNKNOWN_GRAY = 0.5


@dataclass(frozen=True, eq=False)
class GBuffer:
    camera: Camera
    mesh: TriMesh               # the mesh that was rasterized, with vertex normals
    face_id: np.ndarray         # (H, W) int64, -1 on background
    bary: np.ndarray            # (H, W, 3)
    t: np.ndarray               # (H, W) ray parameter
    depth: np.ndarray           # (H, W) eye depth, 0 on background
    normal: np.ndarray          # (H, W, 3) interpolated unit world normal
    uv: np.ndarray | None       # (H, W, 2)
    directions: np.ndarray      # (H, W, 3) unit ray directions

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0

    @property
    def height(self) -> int:
        return self.face_id.shape[0]

    @property
    def width(self) -> int:
        return self.face_id.shape[1]


def intersect_pairs(origin: np.ndarray, dirs: np.ndarray, v0: np.ndarray, e1: np.ndarray,
                    e2: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise ray/triangle test; returns (hit, t, b1, b2)."""
    pvec = cross3(dirs, e2)
    det = dot3(e1, pvec)
    ok = np.abs(det) > 1e-300
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    b1 = dot3(tvec, pvec) * inv_det
    qvec = cross3(tvec, e1)
    b2 = dot3(dirs, qvec) * inv_det
    t = dot3(e2, qvec) * inv_det
    hit = ok & (b1 >= 0.0) & (b2 >= 0.0) & (b1 + b2 <= 1.0) & (t > HIT_EPSILON)
    return hit, t, b1, b2


def _resolve(pixel: np.ndarray, t: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Index of the winning entry per pixel: smallest t, then lowest face id."""
    order = np.lexsort((face, t, pixel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    return order[first]


def _face_pixel_boxes(mesh: TriMesh, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    proj = project_points(camera, mesh.positions)
    xy = proj.xy[mesh.faces]                        # (F, 3, 2)
    front = proj.in_front[mesh.faces]
    w, h = camera.width, camera.height
    x0 = np.floor(xy[:, :, 0].min(axis=1) - 0.5).astype(np.int64) - 1
    x1 = np.ceil(xy[:, :, 0].max(axis=1) - 0.5).astype(np.int64) + 1
    y0 = np.floor(xy[:, :, 1].min(axis=1) - 0.5).astype(np.int64) - 1
    y1 = np.ceil(xy[:, :, 1].max(axis=1) - 0.5).astype(np.int64) + 1
    # faces crossing the near plane: test every pixel
    partial = front.any(axis=1) & ~front.all(axis=1)
    x0[partial], y0[partial], x1[partial], y1[partial] = 0, 0, w - 1, h - 1
    x0, y0 = np.clip(x0, 0, w - 1), np.clip(y0, 0, h - 1)
    x1, y1 = np.clip(x1, 0, w - 1), np.clip(y1, 0, h - 1)
    visible = front.any(axis=1) & (x1 >= x0) & (y1 >= y0)
    nx = np.where(visible, x1 - x0 + 1, 0)
    ny = np.where(visible, y1 - y0 + 1, 0)
    return x0, y0, nx, ny


def _empty_gbuffer(mesh: TriMesh, camera: Camera, directions: np.ndarray) -> GBuffer:
    h, w = camera.height, camera.width
    return GBuffer(camera, mesh, np.full((h, w), -1, dtype=np.int64), np.zeros((h, w, 3)),
                   np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)),
                   None if mesh.uvs is None else np.zeros((h, w, 2)), directions)


def _fill_gbuffer(mesh: TriMesh, camera: Camera, directions: np.ndarray, pixel: np.ndarray,
                  face: np.ndarray, t: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> GBuffer:
    gb = _empty_gbuffer(mesh, camera, directions)
    h, w = camera.height, camera.width
    face_id = gb.face_id.reshape(-1)
    bary = gb.bary.reshape(-1, 3)
    t_buf = gb.t.reshape(-1)
    depth = gb.depth.reshape(-1)
    normal = gb.normal.reshape(-1, 3)

    face_id[pixel] = face
    bary[pixel] = np.stack([1.0 - b1 - b2, b1, b2], axis=1)
    t_buf[pixel] = t
    _, _, forward = camera.basis()
    d = directions.reshape(-1, 3)[pixel]
    depth[pixel] = t * (d @ forward)

    corners = mesh.faces[face]
    weights = bary[pixel]
    n = np.einsum("pk,pkj->pj", weights, mesh.vertex_normals[corners])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    normal[pixel] = n / np.maximum(length, 1e-300)
    if gb.uv is not None:
        gb.uv.reshape(-1, 2)[pixel] = np.einsum("pk,pkj->pj", weights, mesh.uvs[corners])
    logger.debug(f"Rasterized {mesh.num_faces} faces into {w}x{h}: {len(pixel)} covered pixels")
    return gb


def _prepare(mesh: TriMesh) -> TriMesh:
    return mesh if mesh.vertex_normals is not None else compute_vertex_normals(mesh)


def rasterize(mesh: TriMesh, camera: Camera) -> GBuffer:
    mesh = _prepare(mesh)
    origin, directions = pixel_rays(camera)
    if mesh.is_empty:
        return _empty_gbuffer(mesh, camera, directions)

    flat_dirs = directions.reshape(-1, 3)
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    x0, y0, nx, ny = _face_pixel_boxes(mesh, camera)
    counts = nx * ny
    faces_all = np.flatnonzero(counts > 0)

    best = (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64),
            np.zeros(0), np.zeros(0))
    start = 0
    cumulative = np.cumsum(counts[faces_all])
    while start < len(faces_all):
        base = cumulative[start - 1] if start > 0 else 0
        stop = int(np.searchsorted(cumulative, base + MAX_PAIRS_PER_CHUNK, side="right"))
        stop = max(stop, start + 1)
        fs = faces_all[start:stop]
        start = stop

        c = counts[fs]
        face = np.repeat(fs, c)
        local = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        col = x0[face] + local % nx[face]
        row = y0[face] + local // nx[face]
        pixel = row * camera.width + col

        hit, t, b1, b2 = intersect_pairs(origin, flat_dirs[pixel], v0[face], e1[face], e2[face])
        cand = (np.concatenate([best[0], pixel[hit]]), np.concatenate([best[1], t[hit]]),
                np.concatenate([best[2], face[hit]]), np.concatenate([best[3], b1[hit]]),
                np.concatenate([best[4], b2[hit]]))
        keep = _resolve(cand[0], cand[1], cand[2])
        best = tuple(a[keep] for a in cand)

    pixel, t, face, b1, b2 = best
    return _fill_gbuffer(mesh, camera, directions, pixel, face, t, b1, b2)


def rasterize_brute_force(mesh: TriMesh, camera: Camera) -> GBuffer:
    """Reference rasterizer: every pixel against every face."""
    mesh = _prepare(mesh)
    origin, directions = pixel_rays(camera)
    if mesh.is_empty:
        return _empty_gbuffer(mesh, camera, directions)
    tri = mesh.triangles()
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    nf = mesh.num_faces
    faces = np.arange(nf)
    hits = []
    for p, d in enumerate(directions.reshape(-1, 3)):
        hit, t, b1, b2 = intersect_pairs(origin, np.broadcast_to(d, (nf, 3)), v0, e1, e2)
        if not hit.any():
            continue
        t_hit = np.where(hit, t, np.inf)
        best_t = t_hit.min()
        f = int(faces[t_hit == best_t].min())
        hits.append((p, f, t[f], b1[f], b2[f]))
    if not hits:
        return _empty_gbuffer(mesh, camera, directions)
    cols = list(zip(*hits))
    return _fill_gbuffer(mesh, camera, directions, np.array(cols[0], dtype=np.int64),
                         np.array(cols[1], dtype=np.int64), np.array(cols[2]),
                         np.array(cols[3]), np.array(cols[4]))


# --- shading ------------------------------------------------------------------

def camera_rotation(camera: Camera) -> np.ndarray:
    """Rows map world vectors to camera space (x right, y up, z toward the viewer)."""
    right, up, forward = camera.basis()
    return np.stack([right, up, -forward])


def shade_normal(gbuffer: GBuffer) -> RasterImage:
    """Camera-space unit normals in [-1, 1]; background 0."""
    n = gbuffer.normal @ camera_rotation(gbuffer.camera).T
    return RasterImage(np.where(gbuffer.mask[..., None], n, 0.0))


def normal_to_color(normal_image: RasterImage, mask: np.ndarray | None = None) -> RasterImage:
    """Map [-1, 1] normals to [0, 1] colours (conditioning images)."""
    color = 0.5 * (normal_image.data + 1.0)
    if mask is not None:
        color = np.where(mask[..., None], color, 0.0)
    return RasterImage(color)


def shade_headlight(gbuffer: GBuffer) -> RasterImage:
    """Gray diffuse shading lit from the camera: max(0, n_z) in three channels, background 0."""
    nz = np.clip(shade_normal(gbuffer).data[:, :, 2], 0.0, None)
    return RasterImage(np.repeat(nz[..., None], 3, axis=2))


def headlight_to_normal_grad(gbuffer: GBuffer, grad_color: np.ndarray) -> np.ndarray:
    """Pull a gradient on shade_headlight's image back to shade_normal's image."""
    nz = shade_normal(gbuffer).data[:, :, 2]
    grad = np.zeros(gbuffer.face_id.shape + (3,))
    grad[:, :, 2] = np.where(gbuffer.mask & (nz > 0.0), np.sum(grad_color, axis=2), 0.0)
    return grad


def shade_depth(gbuffer: GBuffer) -> RasterImage:
    return RasterImage(gbuffer.depth.copy())


def shade_mask(gbuffer: GBuffer) -> RasterImage:
    return RasterImage(gbuffer.mask.astype(np.float64))


@dataclass(frozen=True, eq=False)
class Footprint:
    """Bilinear texel support of each pixel."""
    texel_index: np.ndarray     # (H, W, 4) flat texel index
    weights: np.ndarray         # (H, W, 4), sum to 1 on covered pixels
    known: np.ndarray           # (H, W) covered pixel whose weighted texels all have coverage
    clamped: int                # pixels whose UV fell outside [0, 1]^2
    texture_shape: tuple


def bilinear_footprint(uv: np.ndarray, texture_height: int, texture_width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat texel indices (..., 4) and weights (..., 4) for UVs; v points up, row 0 is the top."""
    outside = np.any((uv < 0.0) | (uv > 1.0), axis=-1)
    x = np.clip(uv[..., 0] * texture_width - 0.5, 0.0, texture_width - 1.0)
    y = np.clip((1.0 - uv[..., 1]) * texture_height - 0.5, 0.0, texture_height - 1.0)
    xf, yf = np.floor(x), np.floor(y)
    fx, fy = x - xf, y - yf
    x0, y0 = xf.astype(np.int64), yf.astype(np.int64)
    x1 = np.minimum(x0 + 1, texture_width - 1)
    y1 = np.minimum(y0 + 1, texture_height - 1)
    index = np.stack([y0 * texture_width + x0, y0 * texture_width + x1,
                      y1 * texture_width + x0, y1 * texture_width + x1], axis=-1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return index, weights, outside


def shade_texture(gbuffer: GBuffer, texture, background: float = 0.0) -> tuple[RasterImage, Footprint]:
    """Bilinear texture lookup at interpolated UVs; `texture` has `.texels` (Th, Tw, C) and `.coverage`."""
    if gbuffer.uv is None:
        raise InvalidArgumentError("Texture shading needs a mesh with UVs")
    texels = np.asarray(texture.texels, dtype=np.float64)
    th, tw, channels = texels.shape
    mask = gbuffer.mask
    index, weights, outside = bilinear_footprint(gbuffer.uv, th, tw)
    weights = np.where(mask[..., None], weights, 0.0)
    index = np.where(mask[..., None], index, 0)

    flat = texels.reshape(-1, channels)
    color = np.einsum("hwk,hwkc->hwc", weights, flat[index])
    color = np.where(mask[..., None], color, background)

    coverage = np.asarray(texture.coverage, dtype=bool).reshape(-1)
    texel_ok = coverage[index] | (weights == 0.0)
    known = mask & texel_ok.all(axis=-1)
    clamped = int((outside & mask).sum())
    if clamped:
        logger.debug(f"{clamped} pixels sampled UVs outside [0, 1]^2 (clamped)")
    return RasterImage(color), Footprint(index, weights, known, clamped, (th, tw, channels))


# --- backward -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RenderGradients:
    positions: np.ndarray            # direct dL/d(vertex positions) through barycentrics and depth
    normals: np.ndarray              # dL/d(vertex normals)
    texels: np.ndarray | None = None

    def total_positions(self, mesh: TriMesh) -> np.ndarray:
        """Position gradient including the path through the vertex normals."""
        return self.positions + compute_vertex_normals_backward(mesh, self.normals)


def _check_shape(name: str, grad: np.ndarray, shape: tuple) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != shape:
        raise InvalidArgumentError(f"{name} gradient has shape {grad.shape}, expected {shape}")
    return grad


def accumulate_gradients(gbuffer: GBuffer, footprint: Footprint | None = None, *,
                         grad_normal: np.ndarray | None = None,
                         grad_depth: np.ndarray | None = None,
                         grad_color: np.ndarray | None = None) -> RenderGradients:
    """Pull image gradients back to vertices and texels.

    grad_normal is taken w.r.t. shade_normal's image (H, W, 3), grad_depth
    w.r.t. shade_depth's (H, W), grad_color w.r.t. shade_texture's
    (H, W, C). Colour gradients reach the texels only.
    """
    mesh = gbuffer.mesh
    h, w = gbuffer.height, gbuffer.width
    grad_pos = np.zeros_like(mesh.positions)
    grad_nrm = np.zeros_like(mesh.positions)
    grad_tex = None

    pixels = np.flatnonzero(gbuffer.mask.reshape(-1))
    faces = gbuffer.face_id.reshape(-1)[pixels]
    corners = mesh.faces[faces]
    bary = gbuffer.bary.reshape(-1, 3)[pixels]

    g_bary = np.zeros((len(pixels), 3))
    g_t = np.zeros(len(pixels))

    if grad_normal is not None:
        g = _check_shape("normal", grad_normal, (h, w, 3)).reshape(-1, 3)[pixels]
        g_world = g @ camera_rotation(gbuffer.camera)
        n_k = mesh.vertex_normals[corners]                        # (P, 3, 3)
        s = np.einsum("pk,pkj->pj", bary, n_k)
        length = np.linalg.norm(s, axis=1, keepdims=True)
        n_hat = s / np.maximum(length, 1e-300)
        g_s = (g_world - n_hat * np.sum(n_hat * g_world, axis=1, keepdims=True)) / np.maximum(length, 1e-300)
        for k in range(3):
            np.add.at(grad_nrm, corners[:, k], bary[:, k:k + 1] * g_s)
        g_bary += np.einsum("pkj,pj->pk", n_k, g_s)

    if grad_depth is not None:
        g = _check_shape("depth", grad_depth, (h, w)).reshape(-1)[pixels]
        _, _, forward = gbuffer.camera.basis()
        d = gbuffer.directions.reshape(-1, 3)[pixels]
        g_t += g * (d @ forward)

    if np.any(g_bary) or np.any(g_t):
        p = mesh.positions[corners]
        d = gbuffer.directions.reshape(-1, 3)[pixels]
        m = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], -d], axis=-1)     # columns e1, e2, -d
        rhs = np.stack([g_bary[:, 1] - g_bary[:, 0], g_bary[:, 2] - g_bary[:, 0], g_t], axis=1)
        lam = np.linalg.solve(np.transpose(m, (0, 2, 1)), rhs[..., None])[..., 0]
        for k in range(3):
            np.add.at(grad_pos, corners[:, k], -bary[:, k:k + 1] * lam)

    if grad_color is not None:
        if footprint is None:
            raise InvalidArgumentError("Colour gradients need the footprint from shade_texture")
        th, tw, channels = footprint.texture_shape
        g = _check_shape("colour", grad_color, (h, w, channels)).reshape(-1, channels)[pixels]
        idx = footprint.texel_index.reshape(-1, 4)[pixels]
        wts = footprint.weights.reshape(-1, 4)[pixels]
        flat = np.zeros((th * tw, channels))
        np.add.at(flat, idx.reshape(-1), (wts[:, :, None] * g[:, None, :]).reshape(-1, channels))
        grad_tex = flat.reshape(th, tw, channels)

    return RenderGradients(grad_pos, grad_nrm, grad_tex)


# --- landmark image -------------------------------------------------------------

def project_landmarks(landmarks, camera: Camera, gbuffer: GBuffer | None = None,
                      radius: float = LANDMARK_RADIUS_PX,
                      occlusion_eps: float = LANDMARK_OCCLUSION_EPS) -> RasterImage:
    """White anti-aliased disks on black, one channel; hidden or off-screen landmarks are skipped."""
    image = np.zeros((camera.height, camera.width))
    points = np.asarray(getattr(landmarks, "points", landmarks), dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return RasterImage(image)
    proj = project_points(camera, points)
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(camera.height) + 0.5
    for (x, y), depth, front in zip(proj.xy, proj.depth, proj.in_front):
        if not front or not (0.0 <= x < camera.width and 0.0 <= y < camera.height):
            continue
        if gbuffer is not None:
            i, j = int(y), int(x)
            if gbuffer.mask[i, j] and depth > gbuffer.depth[i, j] + occlusion_eps:
                continue
        dist = np.hypot(cols[None, :] - x, rows[:, None] - y)
        image = np.maximum(image, np.clip(radius + 0.5 - dist, 0.0, 1.0))
    return RasterImage(image)


def render_turntable(mesh: TriMesh, texture, cameras: list[Camera]) -> list[RasterImage]:
    """Textured renders when `texture` is given, normal-shaded otherwise."""
    renders = []
    for camera in cameras:
        gb = rasterize(mesh, camera)
        if texture is not None and mesh.uvs is not None:
            color, _ = shade_texture(gb, texture)
        else:
            color = normal_to_color(shade_normal(gb), gb.mask)
        renders.append(color)
    return renders
