"""
Head sculpting pipeline: main CLI entry point.

Usage:
  python execution/pipeline.py run --config run.yaml              # geometry, texture, metrics, export
  python execution/pipeline.py run --config run.yaml --stage geometry
  python execution/pipeline.py texture --config run.yaml          # resume from <out>/geometry/
  python execution/pipeline.py metrics --mesh a.obj --target b.obj
  python execution/pipeline.py render-turntable --mesh mesh.obj --texture texture.png --out views/

Exit codes: 0 success, 2 configuration error, 3 stage failure.

Prerequisites:
  1. pip install -r execution/requirements.txt
  2. (Optional) copy .env.example to .env and set SCULPTD_THREADS / SCULPTD_LOG_LEVEL
  3. Write a run config (see README.md); paths resolve relative to it
"""

import argparse
import logging
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

# Ensure execution/ is on the path when run from workspace root
sys.path.insert(0, str(Path(__file__).parent))

from logger import setup_logger
from assets import RunReport, StageReport, export_assets, loss_curve, render_turntable
from camera import Camera
from conditions import DEFAULT_IDENTITY_DIM, build_condition_bundle, derive_identity_vector, read_identity_vector
from config import PipelineConfig, load_config, load_env
from errors import ConfigError, InvalidArgumentError, SculptError, StageError
from geometry_stage import (
    ReferenceSupervision, load_reference_supervision, load_sculpt_state, run_geometry_stage,
    save_reference_supervision, supervision_from_mesh,
)
from guidance import GuidanceProvider, SyntheticTargetOracle, render_target
from http_provider import HttpGuidanceProvider
from image_io import RasterImage, load_png, save_png
from landmarks import align_landmarks_to_mesh, load_landmarks
from mesh import TriMesh, make_icosphere
from mesh_io import load_mesh, read_obj, write_obj
from metrics import DEFAULT_CHAMFER_SAMPLES, chamfer_distance, mask_iou, psnr
from rasterizer import rasterize, shade_mask, shade_texture
from texture_atlas import TextureState, build_texel_map, dilate_texture, unwrap_uv
from texture_stage import run_texture_stage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

STAGES = ("geometry", "texture", "all")
GEOMETRY_DIR = "geometry"
DEFAULT_ORACLE_AXES = (0.55, 0.7, 0.6)
DEFAULT_INITIAL_RADIUS = 0.5
ORACLE_SUBDIVISIONS = 4


# --- scene setup ------------------------------------------------------------------

def procedural_texture(mesh: TriMesh, atlas_size: int) -> tuple[TriMesh, TextureState]:
    """Unwrap `mesh` and colour each texel by its surface position."""
    mesh, _ = unwrap_uv(mesh, atlas_size)
    texel_map = build_texel_map(mesh, atlas_size)
    lo, hi = mesh.bounds()
    extent = np.maximum(hi - lo, 1e-9)
    texels = 0.15 + 0.7 * (texel_map.point - lo) / extent
    texels = np.where(texel_map.mask[..., None], np.clip(texels, 0.0, 1.0), 0.0)
    texels, coverage = dilate_texture(texels, texel_map.mask, 2)
    return mesh, TextureState(texels, coverage)


def oracle_scene(cfg: PipelineConfig) -> tuple[TriMesh, TextureState]:
    p = cfg.provider
    if p.oracle_mesh is not None:
        mesh = load_mesh(p.oracle_mesh)
    else:
        mesh = make_icosphere(ORACLE_SUBDIVISIONS, 1.0, scale=p.oracle_ellipsoid_axes or DEFAULT_ORACLE_AXES)
    if p.oracle_texture is None:
        return procedural_texture(mesh, cfg.texture.atlas_size)
    if mesh.uvs is None:
        raise ConfigError("provider.oracle_texture needs an oracle mesh with UVs", field="provider.oracle_texture")
    image = load_png(p.oracle_texture, channels=3)
    return mesh, TextureState(image.data, np.ones((image.height, image.width), dtype=bool))


def build_provider(cfg: PipelineConfig) -> tuple[GuidanceProvider, TriMesh | None, TextureState | None]:
    """Provider plus the oracle's ground-truth scene (None for external providers)."""
    p = cfg.provider
    if p.kind == "http":
        logger.info(f"Guidance provider: http @ {p.endpoint}")
        return HttpGuidanceProvider(p.endpoint, p.timeout), None, None
    gt_mesh, gt_texture = oracle_scene(cfg)
    logger.info(f"Guidance provider: synthetic oracle ({gt_mesh.num_faces} faces, blur {p.blur})")
    return SyntheticTargetOracle(gt_mesh, gt_texture, p.blur, p.identity_dim), gt_mesh, gt_texture


def load_supervision(cfg: PipelineConfig, gt_mesh: TriMesh | None,
                     gt_texture: TextureState | None) -> ReferenceSupervision | None:
    if cfg.paths.reference_dir is not None:
        return load_reference_supervision(cfg.paths.reference_dir)
    if gt_mesh is None:
        logger.warning("No reference directory: geometry runs on guidance alone")
        return None
    camera = cfg.reference_camera.to_camera(cfg.render_size)
    image = RasterImage(render_target(gt_mesh, camera, "rgb", gt_texture))
    return supervision_from_mesh(gt_mesh, camera, image)


def initial_mesh(cfg: PipelineConfig) -> TriMesh:
    if cfg.paths.initial_mesh is not None:
        return load_mesh(cfg.paths.initial_mesh)
    return make_icosphere(3, DEFAULT_INITIAL_RADIUS)


def identity_vector(cfg: PipelineConfig, provider: GuidanceProvider, reference_image: RasterImage | None) -> np.ndarray:
    if cfg.paths.identity_vector is not None:
        return read_identity_vector(cfg.paths.identity_vector)
    dim = provider.identity_dim or cfg.provider.identity_dim or DEFAULT_IDENTITY_DIM
    if reference_image is None:
        logger.warning("No reference image: identity vector derived from a blank image")
        reference_image = RasterImage.filled(cfg.render_size, cfg.render_size, 3)
    return derive_identity_vector(reference_image, dim, cfg.seed)


# --- run --------------------------------------------------------------------------

@dataclass
class RunOptions:
    stage: str = "all"
    out_dir: Path | None = None
    debug_dumps: bool = False
    resume: bool = False
    threads: int = 1


def _run_dir(cfg: PipelineConfig, options: RunOptions) -> Path:
    if options.out_dir is not None:
        return Path(options.out_dir)
    if cfg.paths.output_dir is not None:
        return cfg.paths.output_dir
    return load_env().output_dir / f"run_{cfg.config_hash()[:12]}"


def _reference_mask(supervision: ReferenceSupervision | None, camera: Camera) -> np.ndarray | None:
    if supervision is None:
        return None
    return supervision.mask_bool if (supervision.mask.width, supervision.mask.height) == camera.size else None


def run_pipeline(cfg: PipelineConfig, options: RunOptions | None = None) -> RunReport:
    """Geometry stage, texture stage, metrics, asset export."""
    options = options or RunOptions()
    if options.stage not in STAGES:
        raise ConfigError(f"Unknown stage '{options.stage}'", field="--stage")
    out_dir = _run_dir(cfg, options)
    geometry_dir = out_dir / GEOMETRY_DIR
    debug_dir = out_dir / "debug" if options.debug_dumps else None
    report = RunReport(cfg.config_hash(), cfg.seed)

    logger.info(f"\n{'='*60}")
    logger.info(f"Sculpt run {report.config_hash[:16]} -> {out_dir}")
    logger.info(cfg.summary())

    try:
        provider, gt_mesh, gt_texture = build_provider(cfg)
        supervision = load_supervision(cfg, gt_mesh, gt_texture)
        reference_camera = supervision.camera if supervision is not None else cfg.reference_camera.to_camera(cfg.render_size)
        reference_image = supervision.image if supervision is not None else None
        if reference_image is None and options.stage in ("texture", "all"):
            raise ConfigError("The texture stage needs a reference image (ref_image.png)", field="paths.reference_dir")
        start_mesh = initial_mesh(cfg)
        landmarks = load_landmarks(cfg.paths.landmarks) if cfg.paths.landmarks is not None else None
        if landmarks is not None and cfg.landmark_keypoints:
            landmarks = align_landmarks_to_mesh(landmarks, cfg.landmark_keypoints, reference_camera, start_mesh)
        identity = identity_vector(cfg, provider, reference_image)
        bundle = build_condition_bundle(reference_image, identity, landmarks, reference_camera, start_mesh,
                                        cfg.text_tag)
    except ConfigError:
        raise
    except SculptError as e:
        raise StageError("prepare", None, e) from e
    if debug_dir is not None and supervision is not None:
        save_reference_supervision(debug_dir / "reference", supervision)

    # Stage 1: geometry
    if options.stage in ("geometry", "all"):
        logger.info(f"\n{'='*60}")
        logger.info("Stage 1: geometry sculpting")
        started = time.perf_counter()
        state = None
        params_path = geometry_dir / "params.sclp"
        if options.resume and params_path.exists():
            state = load_sculpt_state(params_path, cfg.geometry)
            logger.info(f"Resuming geometry from {params_path} at iteration {state.iteration}")
        try:
            result = run_geometry_stage(start_mesh, supervision, provider, cfg.geometry, bundle, cfg.render_size,
                                        cfg.stage_seed("geometry"), landmarks, options.threads, geometry_dir,
                                        state, cfg.provider.cfg_scale)
        except StageError:
            raise
        except SculptError as e:
            raise StageError("geometry", None, e) from e
        mesh = result.mesh
        write_obj(geometry_dir / "final.obj", mesh)
        result.state.save(params_path)
        report.stages["geometry"] = StageReport("resumed" if state is not None else "done",
                                                time.perf_counter() - started,
                                                loss_curve(result.state.history, "reference_total",
                                                           cfg.geometry.log_every))
    else:
        final_path = geometry_dir / "final.obj"
        if not final_path.exists():
            raise StageError("texture", None,
                             InvalidArgumentError(f"No geometry checkpoint at {final_path}; run the geometry stage first"))
        mesh = read_obj(final_path)
        logger.info(f"Loaded geometry checkpoint {final_path} ({mesh.num_faces} faces)")
        report.stages["geometry"] = StageReport("loaded")

    # Stage 2: texture
    texture = None
    texel_occupancy = None
    if options.stage in ("texture", "all"):
        logger.info(f"\n{'='*60}")
        logger.info("Stage 2: texture generation")
        started = time.perf_counter()
        try:
            result = run_texture_stage(mesh, reference_image, reference_camera, provider, cfg.texture, bundle,
                                       cfg.stage_seed("texture"), landmarks,
                                       debug_dir / "texture" if debug_dir is not None else None)
        except StageError:
            raise
        except SculptError as e:
            raise StageError("texture", None, e) from e
        mesh, texture = result.mesh, result.state
        texel_occupancy = result.texel_map.mask
        report.stages["texture"] = StageReport("done", time.perf_counter() - started,
                                               loss_curve(result.history, "loss", cfg.texture.log_every))
    else:
        report.stages["texture"] = StageReport("skipped")

    # Metrics
    logger.info(f"\n{'='*60}")
    logger.info("Evaluating")
    report.metrics = evaluate(mesh, texture, texel_occupancy, gt_mesh, supervision, reference_camera,
                              cfg.seed, options.threads)
    for name, value in report.metrics.items():
        logger.info(f"  {name:<18}: {'n/a' if value is None else f'{value:.6f}'}")

    renders = render_turntable(mesh, texture, reference_camera)
    export_assets(report, mesh, texture, renders, out_dir, cfg.texture.dilation)
    logger.info(f"Report hash {report.content_hash()[:16]}")
    return report


def evaluate(mesh: TriMesh, texture: TextureState | None, occupancy: np.ndarray | None, gt_mesh: TriMesh | None,
             supervision: ReferenceSupervision | None, camera: Camera, seed: int = 0, threads: int = 1) -> dict:
    """Chamfer against the oracle mesh, mask IoU and PSNR at the reference view, texture coverage."""
    metrics = {"chamfer": None, "mask_iou": None, "psnr": None, "coverage": None}
    if gt_mesh is not None:
        metrics["chamfer"] = chamfer_distance(mesh, gt_mesh, DEFAULT_CHAMFER_SAMPLES, seed, threads)
    gb = rasterize(mesh, camera)
    ref_mask = _reference_mask(supervision, camera)
    if ref_mask is not None:
        metrics["mask_iou"] = mask_iou(shade_mask(gb), ref_mask.astype(np.float64))
    if texture is not None:
        metrics["coverage"] = texture.coverage_fraction(occupancy)
        if supervision is not None and supervision.image is not None and ref_mask is not None and ref_mask.any():
            image, _ = shade_texture(gb, texture)
            metrics["psnr"] = psnr(image, supervision.image, ref_mask.astype(np.float64))
    return metrics


# --- commands ---------------------------------------------------------------------

def cmd_run(args: argparse.Namespace, stage: str | None = None) -> int:
    env = load_env()
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}", field="--seed")
        cfg = cfg.model_copy(update={"seed": args.seed})
    options = RunOptions(stage or args.stage, args.out, args.debug_dumps, args.resume, env.threads)
    out_dir = _run_dir(cfg, options)
    setup_logger(level=env.log_level, log_file=out_dir / "sculptd.log")
    report = run_pipeline(cfg, options)

    logger.info(f"\n{'='*60}")
    logger.info("Pipeline complete.")
    for name, stage_report in report.stages.items():
        logger.info(f"  {name:<9}: {stage_report.status} ({stage_report.seconds:.1f} s)")
    return EXIT_OK


def _require_file(path: Path | None, flag: str) -> Path | None:
    if path is not None and not Path(path).exists():
        raise ConfigError(f"File not found: {path}", field=flag)
    return path


def cmd_metrics(args: argparse.Namespace) -> int:
    results = {}
    if args.mesh is not None or args.target is not None:
        if args.mesh is None or args.target is None:
            raise ConfigError("--mesh and --target go together", field="--target")
        a = load_mesh(_require_file(args.mesh, "--mesh"))
        b = load_mesh(_require_file(args.target, "--target"))
        results["chamfer"] = chamfer_distance(a, b, args.samples, args.seed, load_env().threads)
    if args.image is not None or args.reference is not None:
        if args.image is None or args.reference is None:
            raise ConfigError("--image and --reference go together", field="--reference")
        image = load_png(_require_file(args.image, "--image"), channels=3)
        reference = load_png(_require_file(args.reference, "--reference"), channels=3)
        mask = None
        if args.mask is not None:
            mask = load_png(_require_file(args.mask, "--mask"), srgb=False, channels=1)
        results["psnr"] = psnr(image, reference, mask)
    if args.pred_mask is not None:
        if args.mask is None:
            raise ConfigError("--pred-mask needs --mask", field="--mask")
        results["mask_iou"] = mask_iou(load_png(_require_file(args.pred_mask, "--pred-mask"), srgb=False, channels=1),
                                       load_png(_require_file(args.mask, "--mask"), srgb=False, channels=1))
    if not results:
        raise ConfigError("Nothing to evaluate: give --mesh/--target and/or --image/--reference")
    print(yaml.safe_dump({k: float(v) for k, v in results.items()}, sort_keys=True), end="")
    return EXIT_OK


def cmd_render_turntable(args: argparse.Namespace) -> int:
    mesh = load_mesh(_require_file(args.mesh, "--mesh"))
    texture = None
    if args.texture is not None:
        image = load_png(_require_file(args.texture, "--texture"), channels=3)
        texture = TextureState(image.data, np.ones((image.height, image.width), dtype=bool))
    template = Camera(0.0, 0.0, args.distance, args.fovy, (0.0, 0.0, 0.0), args.size, args.size)
    renders = render_turntable(mesh, texture, template, args.views, args.elevation)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, render in enumerate(renders):
        save_png(out_dir / f"turntable_{k:02d}.png", render)
    logger.info(f"Wrote {len(renders)} views to {out_dir}")
    return EXIT_OK


def _add_run_arguments(parser: argparse.ArgumentParser, with_stage: bool) -> None:
    parser.add_argument("--config", type=Path, required=True, help="Run config (YAML)")
    parser.add_argument("--seed", type=int, default=None, help="Override the config's global seed")
    if with_stage:
        parser.add_argument("--stage", choices=STAGES, default="all",
                            help="Run only one stage (texture resumes from <out>/geometry/)")
    parser.add_argument("--debug-dumps", action="store_true",
                        help="Write reference supervision and per-view inpainted images under <out>/debug/")
    parser.add_argument("--out", type=Path, default=None, help="Run directory (default: from config or env)")
    parser.add_argument("--resume", action="store_true",
                        help="Continue geometry from <out>/geometry/params.sclp when present")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sculptd",
        description="Reference-guided 3D head sculpting: DMTet geometry, then a progressively inpainted texture",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run geometry and/or texture stages, metrics and export")
    _add_run_arguments(run, with_stage=True)
    run.set_defaults(handler=cmd_run)

    geometry = sub.add_parser("geometry", help="Geometry stage only")
    _add_run_arguments(geometry, with_stage=False)
    geometry.set_defaults(handler=lambda a: cmd_run(a, "geometry"))

    texture = sub.add_parser("texture", help="Texture stage only, from a geometry checkpoint")
    _add_run_arguments(texture, with_stage=False)
    texture.set_defaults(handler=lambda a: cmd_run(a, "texture"))

    metrics = sub.add_parser("metrics", help="Chamfer distance, PSNR and mask IoU between files")
    metrics.add_argument("--mesh", type=Path, default=None)
    metrics.add_argument("--target", type=Path, default=None)
    metrics.add_argument("--samples", type=int, default=DEFAULT_CHAMFER_SAMPLES)
    metrics.add_argument("--seed", type=int, default=0)
    metrics.add_argument("--image", type=Path, default=None)
    metrics.add_argument("--reference", type=Path, default=None)
    metrics.add_argument("--mask", type=Path, default=None, help="Reference mask (PSNR region, IoU target)")
    metrics.add_argument("--pred-mask", type=Path, default=None, help="Predicted mask for IoU against --mask")
    metrics.set_defaults(handler=cmd_metrics)

    turntable = sub.add_parser("render-turntable", help="Render views around a mesh")
    turntable.add_argument("--mesh", type=Path, required=True)
    turntable.add_argument("--texture", type=Path, default=None)
    turntable.add_argument("--out", type=Path, required=True)
    turntable.add_argument("--size", type=int, default=512)
    turntable.add_argument("--views", type=int, default=8)
    turntable.add_argument("--distance", type=float, default=3.0)
    turntable.add_argument("--fovy", type=float, default=40.0)
    turntable.add_argument("--elevation", type=float, default=0.0)
    turntable.set_defaults(handler=cmd_render_turntable)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logger(level=load_env().log_level)
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"✗ Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        logger.error(f"✗ {e}\n{traceback.format_exc()}")
        return EXIT_STAGE
    except SculptError as e:
        logger.error(f"✗ {type(e).__name__}: {e}\n{traceback.format_exc()}")
        return EXIT_STAGE
    except Exception as e:
        logger.error(f"✗ Unexpected failure: {type(e).__name__}: {e}\n{traceback.format_exc()}")
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
