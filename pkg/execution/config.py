"""
Configuration for the sculpting pipeline.

Two layers:
  - environment (.env via python-dotenv): thread cap, log level, output root
  - pipeline config file (YAML) validated by pydantic models; unknown keys
    are rejected, parse errors carry line/column, validation errors name
    the dotted field path.

Run directly to validate a config file: python execution/config.py run.yaml
"""

import hashlib
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from camera import CameraRanges, camera_from_spherical
from errors import ConfigError

logger = logging.getLogger(__name__)

# Resolve workspace root (one level up from execution/)
WORKSPACE_ROOT = Path(__file__).parent.parent
ENV_FILE = WORKSPACE_ROOT / ".env"

DEFAULT_AZIMUTHS = (0.0, 45.0, -45.0, 90.0, -90.0, 135.0, -135.0, 180.0)


def _optional(key: str, default: str = "") -> str:
    return os.getenv(key, default).strip()


@dataclass
class EnvSettings:
    threads: int
    log_level: str
    output_dir: Path


def load_env() -> EnvSettings:
    load_dotenv(ENV_FILE, override=False)
    raw_threads = _optional("SCULPTD_THREADS", "1")
    try:
        threads = max(1, int(raw_threads))
    except ValueError:
        raise ConfigError(f"SCULPTD_THREADS must be an integer, got '{raw_threads}'", field="SCULPTD_THREADS")
    return EnvSettings(
        threads=threads,
        log_level=_optional("SCULPTD_LOG_LEVEL", "INFO").upper(),
        output_dir=WORKSPACE_ROOT / _optional("SCULPTD_OUTPUT_DIR", ".tmp/runs"),
    )


# --- config file models ------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_range(name: str, value: tuple[float, float]) -> None:
    if value[0] > value[1]:
        raise ValueError(f"{name} range min {value[0]} exceeds max {value[1]}")


class CameraRangesConfig(_Strict):
    elevation: tuple[float, float] = (-20.0, 45.0)
    azimuth: tuple[float, float] = (-180.0, 180.0)
    fovy: tuple[float, float] = (30.0, 45.0)
    distance: tuple[float, float] = (2.5, 4.0)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("elevation", "azimuth", "fovy", "distance"):
            _check_range(name, getattr(self, name))
        if self.fovy[0] <= 0.0 or self.fovy[1] >= 180.0:
            raise ValueError("fovy range must lie inside (0, 180)")
        if self.distance[0] <= 0.0:
            raise ValueError("distance range must be positive")
        return self

    def to_ranges(self, look_at=(0.0, 0.0, 0.0), size=(512, 512)) -> CameraRanges:
        return CameraRanges(elevation=tuple(self.elevation), azimuth=tuple(self.azimuth),
                            fovy=tuple(self.fovy), distance=tuple(self.distance),
                            look_at=tuple(look_at), size=tuple(size))


class CameraConfig(_Strict):
    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = Field(3.0, gt=0.0)
    fovy: float = Field(40.0, gt=0.0, lt=180.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_camera(self, size: int):
        return camera_from_spherical(self.azimuth, self.elevation, self.distance, self.fovy,
                                     self.look_at, (size, size))


class PathsConfig(_Strict):
    initial_mesh: Path | None = None
    reference_dir: Path | None = None
    identity_vector: Path | None = None
    landmarks: Path | None = None
    output_dir: Path | None = None


class ProviderConfig(_Strict):
    kind: Literal["oracle", "http"] = "oracle"
    endpoint: str | None = None
    timeout: float = Field(120.0, gt=0.0)
    # synthetic oracle scene: a GT mesh file, or an analytic ellipsoid
    oracle_mesh: Path | None = None
    oracle_texture: Path | None = None
    oracle_ellipsoid_axes: tuple[float, float, float] | None = None
    blur: float = Field(0.0, ge=0.0)
    identity_dim: int | None = Field(None, ge=1)
    cfg_scale: float = Field(7.5, ge=0.0)

    @model_validator(mode="after")
    def _endpoint_for_http(self):
        if self.kind == "http" and not self.endpoint:
            raise ValueError("provider.endpoint is required when kind is 'http'")
        return self


class GeometryStageConfig(_Strict):
    grid_resolution: int = Field(512, ge=2)
    grid_bounds: tuple[float, float] = (-1.0, 1.0)
    deform_limit: float = Field(0.45, gt=0.0, lt=0.5)
    fit_iterations: int = Field(500, ge=0)
    refine_iterations: int = Field(5000, ge=0)
    lambda_mask: float = Field(100.0, ge=0.0)
    lambda_normal: float = Field(10.0, ge=0.0)
    lambda_depth: float = Field(1.0, ge=0.0)
    lambda_isd: float = Field(1.0, ge=0.0)
    lr_sdf: float = Field(1e-3, ge=0.0)
    lr_deform: float = Field(1e-4, ge=0.0)
    # learning rates decay linearly to this fraction over the refinement
    lr_end_fraction: float = Field(0.1, ge=0.0, le=1.0)
    camera_ranges: CameraRangesConfig = CameraRangesConfig()
    reference_probability: float = Field(0.25, ge=0.0, le=1.0)
    both_branches_fraction: float = Field(0.1, ge=0.0, le=1.0)
    guidance_mode: Literal["isd", "sds", "vsd"] = "isd"
    guidance_image: Literal["normal", "rgb"] = "normal"
    use_reference_mask: bool = True
    use_reference_normal: bool = True
    use_reference_depth: bool = True
    silhouette_sharpness: float = Field(2.0, gt=0.0)
    diffusion_steps: int = Field(1000, ge=1)
    t_min_frac: float = Field(0.02, ge=0.0, le=1.0)
    t_max_frac: float = Field(0.98, ge=0.0, le=1.0)
    t_anneal_to: float = Field(0.5, ge=0.0, le=1.0)
    checkpoint_every: int = Field(500, ge=0)
    log_every: int = Field(50, ge=1)
    seed: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        _check_range("grid_bounds", self.grid_bounds)
        if self.grid_bounds[0] == self.grid_bounds[1]:
            raise ValueError("grid_bounds must not be degenerate")
        _check_range("timestep fraction", (self.t_min_frac, self.t_max_frac))
        return self


class TextureStageConfig(_Strict):
    atlas_size: int = Field(1024, ge=8)
    gutter: int = Field(2, ge=0)
    trajectory_azimuths: tuple[float, ...] = DEFAULT_AZIMUTHS
    trajectory_elevation: float = -15.0
    include_top_view: bool = True
    top_view_azimuth: float = 0.0
    top_view_elevation: float = 60.0
    trajectory_order: Literal["progressive", "surround"] = "progressive"
    refine_steps: int = Field(400, ge=0)
    refine_timestep: int = Field(120, ge=0)
    lambda_mse: float = Field(1.0, ge=0.0)
    lambda_percep: float = Field(0.1, ge=0.0)
    lambda_ref: float = Field(1.0, ge=0.0)
    lr: float = Field(1e-2, ge=0.0)
    reference_probability: float = Field(0.25, ge=0.0, le=1.0)
    grazing_angle: float = Field(75.0, gt=0.0, le=90.0)
    camera_ranges: CameraRangesConfig = CameraRangesConfig()
    diffusion_steps: int = Field(1000, ge=1)
    dilation: int = Field(4, ge=0)
    log_every: int = Field(50, ge=1)
    seed: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _timestep_in_schedule(self):
        if self.refine_timestep >= self.diffusion_steps:
            raise ValueError(f"refine_timestep {self.refine_timestep} must be < diffusion_steps {self.diffusion_steps}")
        return self


class PipelineConfig(_Strict):
    paths: PathsConfig = PathsConfig()
    geometry: GeometryStageConfig = GeometryStageConfig()
    texture: TextureStageConfig = TextureStageConfig()
    provider: ProviderConfig = ProviderConfig()
    reference_camera: CameraConfig = CameraConfig()
    landmark_keypoints: list[int] | None = None
    text_tag: str = "a photo of a person's head"
    seed: int = Field(0, ge=0)
    render_size: int = Field(512, ge=8)

    def canonical_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, default_flow_style=False)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_yaml().encode("utf-8")).hexdigest()

    def stage_seed(self, stage: str) -> int:
        own = self.geometry.seed if stage == "geometry" else self.texture.seed
        return int(own) if own is not None else int(self.seed) + (0 if stage == "geometry" else 1)

    def summary(self) -> str:
        g, t, p = self.geometry, self.texture, self.provider
        lines = [
            "=== Sculpt Configuration ===",
            f"  Initial mesh      : {self.paths.initial_mesh or 'ellipsoid primitive'}",
            f"  Reference dir     : {self.paths.reference_dir or 'oracle renders'}",
            f"  Identity vector   : {self.paths.identity_vector or 'derived'}",
            f"  Provider          : {p.kind}{' @ ' + p.endpoint if p.endpoint else ''}",
            f"  Render size       : {self.render_size}",
            f"  Grid resolution   : {g.grid_resolution}",
            f"  Geometry iters    : fit {g.fit_iterations}, refine {g.refine_iterations}",
            f"  Guidance          : {g.guidance_mode} on {g.guidance_image} images",
            f"  Loss weights      : mask {g.lambda_mask}, normal {g.lambda_normal}, "
            f"depth {g.lambda_depth}, isd {g.lambda_isd}",
            f"  Atlas size        : {t.atlas_size}",
            f"  Trajectory        : {len(t.trajectory_azimuths)} views at {t.trajectory_elevation} deg"
            f"{' + top view' if t.include_top_view else ''} ({t.trajectory_order})",
            f"  Texture refine    : {t.refine_steps} steps at t={t.refine_timestep}",
            f"  Seed              : {self.seed}",
            f"  Config hash       : {self.config_hash()[:16]}",
        ]
        return "\n".join(lines)


# --- loading ----------------------------------------------------------------------

def _field_path(loc: tuple) -> str:
    return ".".join(str(part) for part in loc)


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        raise ConfigError(f"{source}: YAML parse error: {e.problem}", line=line, column=column) from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1, column=1)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = _field_path(first["loc"])
        raise ConfigError(f"{source}: invalid value for '{field}': {first['msg']}", field=field) from e


def load_config(path: Path) -> PipelineConfig:
    """Parse, validate and resolve paths relative to the config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), source=str(path))

    base = path.parent
    resolved = {}
    for name in ("initial_mesh", "reference_dir", "identity_vector", "landmarks"):
        value = getattr(cfg.paths, name)
        if value is None:
            continue
        full = value if value.is_absolute() else (base / value)
        if not full.exists():
            raise ConfigError(f"Referenced path does not exist: {full}", field=f"paths.{name}")
        resolved[name] = full
    if cfg.paths.output_dir is not None and not cfg.paths.output_dir.is_absolute():
        resolved["output_dir"] = base / cfg.paths.output_dir
    provider_paths = {}
    for name in ("oracle_mesh", "oracle_texture"):
        value = getattr(cfg.provider, name)
        if value is None:
            continue
        full = value if value.is_absolute() else (base / value)
        if not full.exists():
            raise ConfigError(f"Referenced path does not exist: {full}", field=f"provider.{name}")
        provider_paths[name] = full

    cfg = cfg.model_copy(update={
        "paths": cfg.paths.model_copy(update=resolved),
        "provider": cfg.provider.model_copy(update=provider_paths),
    })
    logger.debug(f"Loaded config {path} (hash {cfg.config_hash()[:16]})")
    return cfg


if __name__ == "__main__":
    # Quick validation: python execution/config.py run.yaml
    sys.path.insert(0, str(WORKSPACE_ROOT / "execution"))
    from logger import setup_logger
    setup_logger()
    if len(sys.argv) < 2:
        print("usage: python execution/config.py <config.yaml>", file=sys.stderr)
        sys.exit(2)
    try:
        env = load_env()
        cfg = load_config(Path(sys.argv[1]))
        print(cfg.summary())
        print(f"  Threads           : {env.threads}")
        print(f"  Output root       : {env.output_dir}")
        print("\n✓ Config is valid.")
    except ConfigError as e:
        print(f"\n✗ Configuration error:\n  {e}", file=sys.stderr)
        sys.exit(2)
