"""
Run report and asset export.

Output layout of a finished run (relative to the run directory):
  mesh.obj, mesh.mtl        final sculpted mesh with UVs and material
  texture.png               gutter-dilated texture atlas (sRGB)
  coverage.png              per-texel coverage mask
  turntable_00.png .. 07    8 views around the head
  report.yaml               RunReport, stable key order
  manifest.yaml             {path, sha256, bytes} for every file above
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from camera import Camera
from errors import AssetWriteError, InvalidArgumentError
from image_io import RasterImage, save_png
from mesh import TriMesh
from mesh_io import write_mtl, write_obj
import rasterizer
from texture_atlas import TextureState, dilate_texture

logger = logging.getLogger(__name__)

TURNTABLE_VIEWS = 8
MATERIAL_NAME = "mesh"
REPORT_FILE = "report.yaml"
MANIFEST_FILE = "manifest.yaml"


@dataclass
class StageReport:
    status: str                          # done, resumed, loaded or skipped
    seconds: float = 0.0
    loss_curve: list = field(default_factory=list)   # [iteration, loss] pairs

    def to_dict(self, timings: bool = True) -> dict:
        record = {"status": self.status, "loss_curve": [[int(i), float(v)] for i, v in self.loss_curve]}
        if timings:
            record["seconds"] = round(float(self.seconds), 3)
        return record


@dataclass
class RunReport:
    config_hash: str
    seed: int
    stages: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": int(self.seed),
            "stages": {name: stage.to_dict(timings) for name, stage in self.stages.items()},
            "metrics": {k: (None if v is None else float(v)) for k, v in self.metrics.items()},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def content_hash(self) -> str:
        """Hash over everything but wall-clock times; equal for reruns with the same seed."""
        text = yaml.safe_dump(self.to_dict(timings=False), sort_keys=True, default_flow_style=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_report(path: Path) -> RunReport:
    record = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    stages = {name: StageReport(s["status"], s.get("seconds", 0.0), [tuple(p) for p in s.get("loss_curve", [])])
              for name, s in record.get("stages", {}).items()}
    return RunReport(record["config_hash"], record["seed"], stages, record.get("metrics", {}))


def loss_curve(history: list, key: str, every: int = 1) -> list:
    """(iteration, value) pairs of `key` from a stage history, one every `every` entries."""
    curve = []
    for k, entry in enumerate(history):
        value = entry.get(key, "")
        if value == "" or value is None or k % max(1, every):
            continue
        curve.append((int(entry.get("iteration", k)), float(value)))
    return curve


def render_turntable(mesh: TriMesh, texture: TextureState | None, template: Camera,
                     views: int = TURNTABLE_VIEWS, elevation: float = 0.0) -> list[RasterImage]:
    """Evenly spaced azimuths starting at the template camera's azimuth."""
    if mesh.is_empty:
        raise InvalidArgumentError("Cannot render a turntable of an empty mesh")
    cameras = [Camera(template.azimuth + 360.0 * k / views, elevation, template.distance, template.fovy,
                      template.look_at, template.width, template.height) for k in range(views)]
    return rasterizer.render_turntable(mesh, texture, cameras)


def _write(path: Path, writer) -> None:
    try:
        writer(path)
    except OSError as e:
        raise AssetWriteError(path, e) from e


def _entry(out_dir: Path, path: Path) -> dict:
    payload = path.read_bytes()
    return {"path": path.relative_to(out_dir).as_posix(), "sha256": hashlib.sha256(payload).hexdigest(),
            "bytes": len(payload)}


def export_assets(report: RunReport, mesh: TriMesh | None, texture: TextureState | None,
                  renders: list[RasterImage], out_dir: Path, dilation: int = 4) -> list[dict]:
    """Write every output file, then the manifest; returns the manifest entries."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise AssetWriteError(out_dir, e) from e

    written = []
    if mesh is not None:
        has_texture = texture is not None and mesh.uvs is not None
        obj_path = out_dir / f"{MATERIAL_NAME}.obj"
        _write(obj_path, lambda p: write_obj(p, mesh, MATERIAL_NAME if has_texture else None))
        written.append(obj_path)
        if has_texture:
            mtl_path = out_dir / f"{MATERIAL_NAME}.mtl"
            _write(mtl_path, lambda p: write_mtl(p, MATERIAL_NAME, "texture.png"))
            written.append(mtl_path)

    if texture is not None:
        texels, _ = dilate_texture(texture.texels, texture.coverage, dilation)
        texture_path = out_dir / "texture.png"
        _write(texture_path, lambda p: save_png(p, RasterImage(texels)))
        coverage_path = out_dir / "coverage.png"
        _write(coverage_path, lambda p: save_png(p, RasterImage(texture.coverage.astype(np.float64)), srgb=False))
        written += [texture_path, coverage_path]

    for k, image in enumerate(renders):
        render_path = out_dir / f"turntable_{k:02d}.png"
        _write(render_path, lambda p, im=image: save_png(p, im))
        written.append(render_path)

    report_path = out_dir / REPORT_FILE
    _write(report_path, lambda p: p.write_text(report.to_yaml(), encoding="utf-8"))
    written.append(report_path)

    manifest = [_entry(out_dir, p) for p in written]
    manifest_path = out_dir / MANIFEST_FILE
    _write(manifest_path, lambda p: p.write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8"))
    logger.info(f"Exported {len(manifest)} files to {out_dir}")
    return manifest


def load_manifest(out_dir: Path) -> list[dict]:
    return yaml.safe_load((Path(out_dir) / MANIFEST_FILE).read_text(encoding="utf-8")) or []
