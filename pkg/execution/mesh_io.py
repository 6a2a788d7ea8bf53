"""
Mesh import/export: OBJ (positions, normals, UVs sharing one index) and
binary PLY through trimesh.
"""

import logging
from pathlib import Path

import numpy as np
import trimesh

from errors import InvalidArgumentError
from mesh import TriMesh

logger = logging.getLogger(__name__)


def write_obj(path: Path, mesh: TriMesh, mtl_name: str | None = None) -> None:
    """Write v/vt/vn with shared indices; `mtl_name` adds a material reference."""
    path = Path(path)
    lines = ["# sculptd mesh"]
    if mtl_name:
        lines.append(f"mtllib {mtl_name}.mtl")
        lines.append(f"usemtl {mtl_name}")
    for p in mesh.positions:
        lines.append(f"v {p[0]:.9f} {p[1]:.9f} {p[2]:.9f}")
    if mesh.uvs is not None:
        for uv in mesh.uvs:
            lines.append(f"vt {uv[0]:.9f} {uv[1]:.9f}")
    if mesh.vertex_normals is not None:
        for n in mesh.vertex_normals:
            lines.append(f"vn {n[0]:.9f} {n[1]:.9f} {n[2]:.9f}")
    has_uv = mesh.uvs is not None
    has_n = mesh.vertex_normals is not None
    for f in mesh.faces + 1:
        if has_uv and has_n:
            lines.append("f " + " ".join(f"{i}/{i}/{i}" for i in f))
        elif has_uv:
            lines.append("f " + " ".join(f"{i}/{i}" for i in f))
        elif has_n:
            lines.append("f " + " ".join(f"{i}//{i}" for i in f))
        else:
            lines.append(f"f {f[0]} {f[1]} {f[2]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path} ({mesh.num_vertices} vertices, {mesh.num_faces} faces)")


def write_mtl(path: Path, name: str, texture_file: str) -> None:
    Path(path).write_text(
        f"newmtl {name}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {texture_file}\n",
        encoding="utf-8",
    )


def read_obj(path: Path) -> TriMesh:
    """Read an OBJ whose v/vt/vn lists share indices (as written by write_obj).

    Polygons are fan-triangulated; only the position index of each corner is
    used for connectivity.
    """
    positions, uvs, normals, faces = [], [], [], []
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = [int(c.split("/")[0]) for c in parts[1:]]
                idx = [i - 1 if i > 0 else len(positions) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as e:
            raise InvalidArgumentError(f"{path}:{line_no}: malformed '{tag}' record: {e}") from e

    positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
    uv_arr = np.array(uvs, dtype=np.float64) if len(uvs) == len(positions) and uvs else None
    n_arr = np.array(normals, dtype=np.float64) if len(normals) == len(positions) and normals else None
    mesh = TriMesh(positions, np.array(faces, dtype=np.int64).reshape(-1, 3), vertex_normals=n_arr, uvs=uv_arr)
    logger.info(f"Loaded {path}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    return mesh


def write_ply(path: Path, mesh: TriMesh) -> None:
    tm = trimesh.Trimesh(vertices=mesh.positions, faces=mesh.faces,
                         vertex_normals=mesh.vertex_normals, process=False)
    Path(path).write_bytes(trimesh.exchange.ply.export_ply(tm, encoding="binary"))


def read_ply(path: Path) -> TriMesh:
    tm = trimesh.load(str(path), file_type="ply", process=False, force="mesh")
    return TriMesh(np.asarray(tm.vertices, dtype=np.float64), np.asarray(tm.faces, dtype=np.int64))


def load_mesh(path: Path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise InvalidArgumentError(f"Unsupported mesh format '{suffix}' for {path}")
