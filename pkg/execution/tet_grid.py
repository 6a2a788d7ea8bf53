"""
Deformable tetrahedral grid: lattice construction, per-vertex parameters and
the "SCLP" binary container used for grid/param checkpoints.

Each cube of the lattice is split into 6 tetrahedra sharing its main
diagonal. Cubes with odd indices are mirrored along those axes, so that
neighbouring cubes agree on every shared face diagonal and the grid stays
conforming. Tets are reordered where needed to keep positive signed volume.
"""

import io
import logging
import struct
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SCLP_MAGIC = b"SCLP"
SCLP_VERSION = 1
DEFAULT_DEFORM_LIMIT = 0.45

# Corner c of a unit cube sits at (c & 1, c >> 1 & 1, c >> 2 & 1)
_AXIS_BIT = (1, 2, 4)
_KUHN_TETS = np.array(
    [[0, _AXIS_BIT[a], _AXIS_BIT[a] | _AXIS_BIT[b], 7] for a, b, _ in permutations(range(3))],
    dtype=np.int64,
)


@dataclass(frozen=True, eq=False)
class TetGrid:
    resolution: int
    bounds: tuple[np.ndarray, np.ndarray]
    vertices: np.ndarray   # (N, 3)
    tets: np.ndarray       # (T, 4)

    @property
    def cell_size(self) -> np.ndarray:
        lo, hi = self.bounds
        return (hi - lo) / self.resolution

    @property
    def cell_edge(self) -> float:
        """Shortest lattice spacing; the deform limit is a fraction of it."""
        return float(self.cell_size.min())

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def signed_volumes(self, positions: np.ndarray | None = None) -> np.ndarray:
        p = (self.vertices if positions is None else positions)[self.tets]
        return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0]) / 6.0


@dataclass(eq=False)
class DmtetParams:
    """Optimized geometry: one signed distance and one displacement per grid vertex."""
    sdf: np.ndarray
    deform: np.ndarray
    deform_limit: float = DEFAULT_DEFORM_LIMIT

    def copy(self) -> "DmtetParams":
        return DmtetParams(self.sdf.copy(), self.deform.copy(), self.deform_limit)

    def deformed_positions(self, grid: TetGrid) -> np.ndarray:
        return grid.vertices + self.deform

    def validate(self, grid: TetGrid) -> None:
        if self.sdf.shape != (grid.num_vertices,) or self.deform.shape != (grid.num_vertices, 3):
            raise InvalidArgumentError(
                f"Params sized {self.sdf.shape}/{self.deform.shape} do not match a grid of "
                f"{grid.num_vertices} vertices"
            )
        if not np.all(np.isfinite(self.sdf)):
            raise InvalidArgumentError("sdf contains non-finite values")
        limit = self.deform_limit * grid.cell_edge
        if np.any(np.linalg.norm(self.deform, axis=1) > limit * (1.0 + 1e-9)):
            raise InvalidArgumentError(f"deform exceeds limit {limit:.6g}")


def _check_bounds(bounds) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(bounds[0], dtype=np.float64).reshape(3)
    hi = np.asarray(bounds[1], dtype=np.float64).reshape(3)
    if not np.all(hi > lo):
        raise InvalidArgumentError(f"Degenerate bounds {lo.tolist()} .. {hi.tolist()}")
    return lo, hi


def build_tet_grid(resolution: int, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> TetGrid:
    """Canonical conforming tetrahedralization with (r+1)^3 vertices and 6 r^3 tets."""
    if int(resolution) != resolution or resolution < 2:
        raise InvalidArgumentError(f"Grid resolution must be an integer >= 2, got {resolution}")
    r = int(resolution)
    lo, hi = _check_bounds(bounds)
    n = r + 1

    # x varies fastest
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    lattice = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1).astype(np.float64)
    vertices = lo + lattice / r * (hi - lo)

    ck, cj, ci = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    corner_bits = np.arange(8)
    flip = (ci % 2) * 1 + (cj % 2) * 2 + (ck % 2) * 4
    local = corner_bits[None, :] ^ flip[:, None]                     # (C, 8) mirrored corner ids
    ox, oy, oz = local & 1, (local >> 1) & 1, (local >> 2) & 1
    corners = (ci[:, None] + ox) + n * ((cj[:, None] + oy) + n * (ck[:, None] + oz))

    tets = corners[:, _KUHN_TETS].reshape(-1, 4)
    grid = TetGrid(r, (lo, hi), vertices, tets)
    negative = grid.signed_volumes() < 0
    tets[negative] = tets[negative][:, [0, 2, 1, 3]]
    logger.debug(f"Built tet grid r={r}: {len(vertices)} vertices, {len(tets)} tets")
    return TetGrid(r, (lo, hi), vertices, tets)


def init_params(grid: TetGrid, sdf: np.ndarray, deform_limit: float = DEFAULT_DEFORM_LIMIT) -> DmtetParams:
    params = DmtetParams(np.asarray(sdf, dtype=np.float64).copy(),
                         np.zeros((grid.num_vertices, 3)), deform_limit)
    params.validate(grid)
    return params


def project_deform(params: DmtetParams, grid: TetGrid) -> None:
    """Clamp every displacement to deform_limit x cell edge, in place."""
    limit = params.deform_limit * grid.cell_edge
    length = np.linalg.norm(params.deform, axis=1)
    over = length > limit
    if np.any(over):
        params.deform[over] *= (limit / length[over])[:, None]


# --- SCLP container -----------------------------------------------------------

_DTYPES = {"f8": np.float64, "f4": np.float32, "i8": np.int64, "i4": np.int32}


def write_sclp(path: Path, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(SCLP_MAGIC)
    buf.write(struct.pack("<II", SCLP_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = arr.dtype.str.lstrip("<>=|")
        if code not in _DTYPES:
            raise InvalidArgumentError(f"Unsupported dtype {arr.dtype} for '{name}'")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(code.encode("ascii"))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_sclp(path: Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != SCLP_MAGIC:
        raise InvalidArgumentError(f"{path} is not an SCLP container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != SCLP_VERSION:
        raise InvalidArgumentError(f"Unsupported SCLP version {version}")
    offset = 12
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code = data[offset:offset + 2].decode("ascii")
        offset += 2
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(data[offset:offset + nbytes], dtype=dtype).reshape(shape).astype(_DTYPES[code])
        offset += nbytes
    return arrays


def save_grid(path: Path, grid: TetGrid, params: DmtetParams | None = None) -> None:
    arrays = {
        "resolution": np.array([grid.resolution], dtype=np.int64),
        "bounds": np.stack(grid.bounds),
    }
    if params is not None:
        arrays["sdf"] = params.sdf
        arrays["deform"] = params.deform
        arrays["deform_limit"] = np.array([params.deform_limit])
    write_sclp(path, arrays)


def load_grid(path: Path) -> tuple[TetGrid, DmtetParams | None]:
    """Rebuild the grid from its resolution/bounds; params come back when stored."""
    arrays = read_sclp(path)
    bounds = arrays["bounds"]
    grid = build_tet_grid(int(arrays["resolution"][0]), (bounds[0], bounds[1]))
    params = None
    if "sdf" in arrays:
        params = DmtetParams(arrays["sdf"].copy(), arrays["deform"].copy(), float(arrays["deform_limit"][0]))
        params.validate(grid)
    return grid, params
