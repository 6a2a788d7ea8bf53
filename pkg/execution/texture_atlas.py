"""
UV atlas construction and the texel-space view of a textured mesh.

Charts come from normal-based region growing (a face joins a chart while its
normal stays within the angle threshold of the chart's seed face), each
chart is flattened onto its area-weighted average plane and the chart
rectangles are shelf-packed into a square atlas with a gutter on every side.
Vertices shared by several charts are duplicated; the duplicates keep the
original vertex normals so shading does not change across seams.

Texel convention matches the rasterizer's bilinear lookup: u grows to the
right, v grows up, texel row 0 is the top of the atlas and texel (i, j) has
its centre at u = (j + 0.5) / W, v = 1 - (i + 0.5) / H.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from errors import DegenerateConfigurationError, InvalidArgumentError
from mesh import TriMesh, compute_vertex_normals, face_areas, face_normals

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_THRESHOLD = 60.0
DEFAULT_GUTTER = 2
PACK_FILL = 0.7                  # first-try fraction of the atlas area given to charts
PACK_SHRINK = 0.8
PACK_RETRIES = 3
TEXEL_MAP_SPILL = 1.5            # texels outside a chart still mapped to its nearest face
_PAIR_CHUNK = 2_000_000


@dataclass(frozen=True, eq=False)
class UvAtlas:
    size: int
    gutter: int
    face_chart: np.ndarray       # (F,) chart id per face
    chart_origin: np.ndarray     # (C, 2) top-left texel (col, row) of each chart rectangle, gutter included
    chart_extent: np.ndarray     # (C, 2) rectangle width/height in texels, gutter included
    scale: float                 # texels per world unit
    vertex_source: np.ndarray    # (N',) original vertex id of each unwrapped vertex

    @property
    def num_charts(self) -> int:
        return len(self.chart_origin)


@dataclass
class TextureState:
    texels: np.ndarray           # (H, W, 3) linear RGB
    coverage: np.ndarray         # (H, W) bool
    generation: int = 0

    @classmethod
    def empty(cls, size: int, channels: int = 3) -> "TextureState":
        return cls(np.zeros((size, size, channels)), np.zeros((size, size), dtype=bool), 0)

    @property
    def size(self) -> int:
        return self.texels.shape[0]

    def copy(self) -> "TextureState":
        return TextureState(self.texels.copy(), self.coverage.copy(), self.generation)

    def coverage_fraction(self, occupied: np.ndarray | None = None) -> float:
        region = np.ones_like(self.coverage) if occupied is None else occupied
        total = int(region.sum())
        return float((self.coverage & region).sum()) / total if total else 0.0


@dataclass(frozen=True, eq=False)
class TexelMap:
    face: np.ndarray             # (H, W) int64, -1 where no chart
    bary: np.ndarray             # (H, W, 3) barycentrics, may leave [0, 1] on spill texels
    point: np.ndarray            # (H, W, 3) surface point
    normal: np.ndarray           # (H, W, 3) unit interpolated normal

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


# --- charts ---------------------------------------------------------------------

def _face_adjacency(faces: np.ndarray) -> list[list[int]]:
    nf = len(faces)
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(nf), 3)
    _, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((owner, inverse))
    neighbours = [[] for _ in range(nf)]
    key, own = inverse[order], owner[order]
    start = 0
    while start < len(order):
        stop = start + 1
        while stop < len(order) and key[stop] == key[start]:
            stop += 1
        group = own[start:stop]
        for i in group:
            for j in group:
                if i != j:
                    neighbours[i].append(int(j))
        start = stop
    return neighbours


def grow_charts(mesh: TriMesh, angle_threshold: float = DEFAULT_ANGLE_THRESHOLD) -> np.ndarray:
    """Chart id per face; seeds are taken in face order, growth is breadth-first."""
    normals = face_normals(mesh)
    neighbours = _face_adjacency(mesh.faces)
    cos_limit = np.cos(np.radians(angle_threshold))
    chart = np.full(mesh.num_faces, -1, dtype=np.int64)
    count = 0
    for seed in range(mesh.num_faces):
        if chart[seed] >= 0:
            continue
        chart[seed] = count
        ref = normals[seed]
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g in neighbours[f]:
                if chart[g] < 0 and float(normals[g] @ ref) > cos_limit:
                    chart[g] = count
                    queue.append(g)
        count += 1
    return chart


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    u = np.cross(normal, axis)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def _shelf_pack(extents: np.ndarray, size: int) -> np.ndarray | None:
    """Top-left positions for integer rectangles, tallest first; None on overflow."""
    order = sorted(range(len(extents)), key=lambda i: (-int(extents[i, 1]), -int(extents[i, 0]), i))
    origin = np.zeros((len(extents), 2), dtype=np.int64)
    x = y = shelf_h = 0
    for i in order:
        w, h = int(extents[i, 0]), int(extents[i, 1])
        if w > size or h > size:
            return None
        if x + w > size:
            y += shelf_h
            x, shelf_h = 0, 0
        if y + h > size:
            return None
        origin[i] = (x, y)
        x += w
        shelf_h = max(shelf_h, h)
    return origin


def unwrap_uv(mesh: TriMesh, atlas_size: int = 1024, gutter: int = DEFAULT_GUTTER,
              angle_threshold: float = DEFAULT_ANGLE_THRESHOLD) -> tuple[TriMesh, UvAtlas]:
    """Chart, flatten and pack; returns the seam-split mesh with UVs and the atlas."""
    if mesh.is_empty:
        raise InvalidArgumentError("Cannot unwrap an empty mesh")
    if atlas_size < 2 * gutter + 2:
        raise InvalidArgumentError(f"Atlas of {atlas_size} texels cannot hold gutters of {gutter}")
    mesh = mesh if mesh.vertex_normals is not None else compute_vertex_normals(mesh)
    chart = grow_charts(mesh, angle_threshold)
    num_charts = int(chart.max()) + 1
    areas = face_areas(mesh)
    normals = face_normals(mesh)

    # one unwrapped vertex per (original vertex, chart)
    corner_chart = np.repeat(chart, 3)
    corner_vertex = mesh.faces.reshape(-1)
    pairs, new_index = np.unique(np.stack([corner_chart, corner_vertex], axis=1), axis=0, return_inverse=True)
    new_faces = new_index.reshape(-1, 3)
    source = pairs[:, 1]
    pair_chart = pairs[:, 0]

    flat = np.zeros((len(pairs), 2))
    lo = np.zeros((num_charts, 2))
    span = np.zeros((num_charts, 2))
    for c in range(num_charts):
        members = chart == c
        n = (normals[members] * areas[members, None]).sum(axis=0)
        if np.linalg.norm(n) < 1e-300:
            n = normals[members][0]
        n = n / np.linalg.norm(n)
        bu, bv = _plane_basis(n)
        verts = pair_chart == c
        p = mesh.positions[source[verts]]
        coords = np.stack([p @ bu, p @ bv], axis=1)
        lo[c] = coords.min(axis=0)
        span[c] = coords.max(axis=0) - lo[c]
        flat[verts] = coords

    usable = atlas_size - 2 * gutter - 1
    longest = max(float(span.max()), 1e-12)
    scale = min(atlas_size * np.sqrt(PACK_FILL / max(float(np.sum(span[:, 0] * span[:, 1])), 1e-24)),
                usable / longest)
    origin = None
    for attempt in range(PACK_RETRIES + 1):
        extent = np.ceil(span * scale).astype(np.int64) + 1 + 2 * gutter
        origin = _shelf_pack(extent, atlas_size)
        if origin is not None:
            break
        logger.info(f"Atlas overflow at scale {scale:.4g} texels/unit (attempt {attempt + 1}); shrinking charts")
        scale *= PACK_SHRINK
    if origin is None:
        raise DegenerateConfigurationError(
            f"{num_charts} charts do not fit a {atlas_size}x{atlas_size} atlas after {PACK_RETRIES} retries"
        )

    col = origin[pair_chart, 0] + gutter + 0.5 + (flat[:, 0] - lo[pair_chart, 0]) * scale
    row = origin[pair_chart, 1] + gutter + 0.5 + (flat[:, 1] - lo[pair_chart, 1]) * scale
    uvs = np.stack([col / atlas_size, 1.0 - row / atlas_size], axis=1)

    unwrapped = TriMesh(mesh.positions[source], new_faces, vertex_normals=mesh.vertex_normals[source],
                        uvs=uvs, normal_valid=None if mesh.normal_valid is None else mesh.normal_valid[source])
    atlas = UvAtlas(atlas_size, gutter, chart, origin, extent, float(scale), source)
    logger.info(f"Unwrapped {mesh.num_faces} faces into {num_charts} charts "
                f"({atlas_size}x{atlas_size}, {scale:.4g} texels/unit)")
    return unwrapped, atlas


# --- texel map ------------------------------------------------------------------

def _uv_to_texel(uv: np.ndarray, size: int) -> np.ndarray:
    return np.stack([uv[..., 0] * size, (1.0 - uv[..., 1]) * size], axis=-1)


def _bary_2d(q: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Barycentrics of 2D points and a validity flag (non-degenerate triangle)."""
    v0, v1, v2 = b - a, c - a, q - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    ok = np.abs(den) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, den, 1.0), 0.0)
    b1 = (v2[:, 0] * v1[:, 1] - v1[:, 0] * v2[:, 1]) * inv
    b2 = (v0[:, 0] * v2[:, 1] - v2[:, 0] * v0[:, 1]) * inv
    return np.stack([1.0 - b1 - b2, b1, b2], axis=1), ok


def build_texel_map(mesh: TriMesh, atlas_size: int) -> TexelMap:
    """Rasterize the mesh in UV space at texel centres.

    Texels inside a UV triangle take that face (lowest face id on shared
    edges); texels within a texel and a half outside their chart take the
    nearest mapped texel's face with extrapolated barycentrics, so bilinear
    lookups along chart borders read mapped texels.
    """
    if mesh.uvs is None:
        raise InvalidArgumentError("Texel map needs a mesh with UVs")
    mesh = mesh if mesh.vertex_normals is not None else compute_vertex_normals(mesh)
    size = atlas_size
    uv_tri = _uv_to_texel(mesh.uvs[mesh.faces], size)              # (F, 3, 2) in texel units
    x0 = np.clip(np.floor(uv_tri[:, :, 0].min(axis=1) - 0.5).astype(np.int64), 0, size - 1)
    x1 = np.clip(np.ceil(uv_tri[:, :, 0].max(axis=1) - 0.5).astype(np.int64), 0, size - 1)
    y0 = np.clip(np.floor(uv_tri[:, :, 1].min(axis=1) - 0.5).astype(np.int64), 0, size - 1)
    y1 = np.clip(np.ceil(uv_tri[:, :, 1].max(axis=1) - 0.5).astype(np.int64), 0, size - 1)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny

    face_map = np.full(size * size, -1, dtype=np.int64)
    bary_map = np.zeros((size * size, 3))
    cumulative = np.cumsum(counts)
    start = 0
    while start < mesh.num_faces:
        base = cumulative[start - 1] if start > 0 else 0
        stop = max(int(np.searchsorted(cumulative, base + _PAIR_CHUNK, side="right")), start + 1)
        fs = np.arange(start, stop)
        start = stop
        c = counts[fs]
        face = np.repeat(fs, c)
        local = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
        col = x0[face] + local % nx[face]
        row = y0[face] + local // nx[face]
        q = np.stack([col + 0.5, row + 0.5], axis=1)
        tri = uv_tri[face]
        bary, ok = _bary_2d(q, tri[:, 0], tri[:, 1], tri[:, 2])
        inside = ok & np.all(bary >= -1e-12, axis=1)
        texel = (row * size + col)[inside]
        face, bary = face[inside], bary[inside]
        # faces arrive in increasing order; keep the first writer per texel
        fresh = face_map[texel] < 0
        texel, face, bary = texel[fresh], face[fresh], bary[fresh]
        _, first = np.unique(texel, return_index=True)
        face_map[texel[first]] = face[first]
        bary_map[texel[first]] = bary[first]

    face_map = face_map.reshape(size, size)
    bary_map = bary_map.reshape(size, size, 3)
    mapped = face_map >= 0
    if mapped.any() and not mapped.all():
        dist, (ri, ci) = ndimage.distance_transform_edt(~mapped, return_indices=True)
        spill = ~mapped & (dist <= TEXEL_MAP_SPILL)
        rows, cols = np.nonzero(spill)
        faces = face_map[ri[rows, cols], ci[rows, cols]]
        q = np.stack([cols + 0.5, rows + 0.5], axis=1)
        tri = uv_tri[faces]
        bary, _ = _bary_2d(q, tri[:, 0], tri[:, 1], tri[:, 2])
        face_map[rows, cols] = faces
        bary_map[rows, cols] = bary

    valid = face_map >= 0
    corners = mesh.faces[np.where(valid, face_map, 0)]
    point = np.einsum("hwk,hwkj->hwj", bary_map, mesh.positions[corners])
    n = np.einsum("hwk,hwkj->hwj", np.clip(bary_map, 0.0, None), mesh.vertex_normals[corners])
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
    point[~valid] = 0.0
    n[~valid] = 0.0
    logger.debug(f"Texel map {size}x{size}: {int(mapped.sum())} interior, {int(valid.sum() - mapped.sum())} spill texels")
    return TexelMap(face_map, bary_map, point, n)


def dilate_texture(texels: np.ndarray, coverage: np.ndarray, iterations: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Grow covered colours outward by `iterations` texels (8-neighbour mean)."""
    texels = np.asarray(texels, dtype=np.float64).copy()
    covered = np.asarray(coverage, dtype=bool).copy()
    kernel = np.ones((3, 3))
    for _ in range(iterations):
        ring = ndimage.binary_dilation(covered, structure=kernel) & ~covered
        if not ring.any():
            break
        weight = ndimage.convolve(covered.astype(np.float64), kernel, mode="constant")
        for ch in range(texels.shape[2]):
            summed = ndimage.convolve(np.where(covered, texels[:, :, ch], 0.0), kernel, mode="constant")
            texels[:, :, ch] = np.where(ring, summed / np.maximum(weight, 1.0), texels[:, :, ch])
        covered |= ring
    return texels, covered


def with_texture_uvs(mesh: TriMesh, atlas_size: int, gutter: int = DEFAULT_GUTTER) -> tuple[TriMesh, UvAtlas | None]:
    """The mesh unchanged when it already carries UVs, otherwise unwrapped."""
    if mesh.uvs is not None:
        return (mesh if mesh.vertex_normals is not None else compute_vertex_normals(mesh)), None
    return unwrap_uv(mesh, atlas_size, gutter)
