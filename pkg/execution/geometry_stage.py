"""
Geometry stage: fit the deformable tet grid to the initial mesh, then sculpt
it with reference-view supervision and identity-aware score distillation on
random views, and extract the final triangle mesh.

Gradient path for every image loss:

    image grads -> accumulate_gradients (normals, depth) + soft silhouette
                -> surface vertex grads -> marching_tetrahedra_backward
                -> (sdf, deform) -> Adam -> deform projection
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from camera import Camera, camera_from_spherical, sample_camera
from conditions import ConditionBundle, view_bundle
from config import GeometryStageConfig
from diffusion import TimestepSampler, make_schedule
from errors import DegenerateInputError, InvalidArgumentError, SculptError, StageError
from guidance import DEFAULT_CFG_SCALE, GuidanceProvider, StaticTargetProvider, sds_gradient, vsd_gradient
from image_io import RasterImage, load_png, read_pfm, save_png, write_pfm
from marching_tets import SurfaceExtraction, extract_surface, marching_tetrahedra_backward
from mesh import TriMesh, compute_vertex_normals
from mesh_io import write_obj
from optim import Adam
from rasterizer import (
    GBuffer, UNKNOWN_GRAY, accumulate_gradients, headlight_to_normal_grad, normal_to_color, rasterize,
    shade_depth, shade_headlight, shade_mask, shade_normal,
)
from sdf_primitives import MeshSdf
from silhouette import soft_silhouette
from tet_grid import DmtetParams, TetGrid, build_tet_grid, init_params, project_deform, read_sclp, write_sclp

logger = logging.getLogger(__name__)

REF_FILES = {
    "normal": "ref_normal.pfm",
    "depth": "ref_depth.pfm",
    "mask": "ref_mask.png",
    "image": "ref_image.png",
    "camera": "ref_camera.yaml",
}

# cell edge of the default 512 grid on [-1, 1]; configured learning rates refer to it
REFERENCE_CELL_EDGE = 2.0 / 512


# --- reference supervision --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceSupervision:
    normal_map: RasterImage      # camera-space normals as [0, 1] colours, background 0
    depth_map: RasterImage       # eye depth, 1 channel
    mask: RasterImage            # binary, 1 channel
    camera: Camera
    image: RasterImage | None = None

    def __post_init__(self):
        size = (self.camera.height, self.camera.width)
        for name in ("normal_map", "depth_map", "mask"):
            img = getattr(self, name)
            if (img.height, img.width) != size:
                raise InvalidArgumentError(f"Reference {name} is {img.width}x{img.height}, camera is "
                                           f"{self.camera.width}x{self.camera.height}")
        if self.image is not None and (self.image.height, self.image.width) != size:
            raise InvalidArgumentError("Reference image resolution differs from the supervision maps")
        m = self.mask.plane
        if not np.all((m == 0.0) | (m == 1.0)):
            raise InvalidArgumentError("Reference mask must be binary")
        if np.any(self.depth_map.plane[m > 0.5] <= 0.0):
            raise InvalidArgumentError("Reference depth must be positive inside the mask")

    @property
    def mask_bool(self) -> np.ndarray:
        return self.mask.plane > 0.5


def supervision_from_mesh(mesh: TriMesh, camera: Camera, image: RasterImage | None = None) -> ReferenceSupervision:
    gb = rasterize(mesh, camera)
    return ReferenceSupervision(normal_to_color(shade_normal(gb), gb.mask), shade_depth(gb), shade_mask(gb),
                                camera, image)


def save_reference_supervision(directory: Path, supervision: ReferenceSupervision) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_pfm(directory / REF_FILES["normal"], supervision.normal_map)
    write_pfm(directory / REF_FILES["depth"], supervision.depth_map)
    save_png(directory / REF_FILES["mask"], supervision.mask, srgb=False)
    if supervision.image is not None:
        save_png(directory / REF_FILES["image"], supervision.image)
    c = supervision.camera
    record = {"azimuth": c.azimuth, "elevation": c.elevation, "distance": c.distance,
              "fovy": c.fovy, "look_at": list(c.look_at)}
    (directory / REF_FILES["camera"]).write_text(yaml.safe_dump(record, sort_keys=True), encoding="utf-8")


def load_reference_supervision(directory: Path) -> ReferenceSupervision:
    directory = Path(directory)
    for key in ("normal", "depth", "mask", "camera"):
        if not (directory / REF_FILES[key]).exists():
            raise InvalidArgumentError(f"Reference directory {directory} is missing {REF_FILES[key]}")
    normal = read_pfm(directory / REF_FILES["normal"])
    depth = read_pfm(directory / REF_FILES["depth"])
    mask_raw = load_png(directory / REF_FILES["mask"], srgb=False, channels=1)
    mask = RasterImage((mask_raw.plane > 0.5).astype(np.float64))
    record = yaml.safe_load((directory / REF_FILES["camera"]).read_text(encoding="utf-8")) or {}
    try:
        camera = camera_from_spherical(record["azimuth"], record["elevation"], record["distance"], record["fovy"],
                                       tuple(record.get("look_at", (0.0, 0.0, 0.0))), (normal.width, normal.height))
    except KeyError as e:
        raise InvalidArgumentError(f"{directory / REF_FILES['camera']} lacks field {e}") from e
    image_path = directory / REF_FILES["image"]
    image = load_png(image_path, channels=3) if image_path.exists() else None
    logger.info(f"Loaded reference supervision {normal.width}x{normal.height} from {directory}")
    return ReferenceSupervision(normal, depth, mask, camera, image)


# --- losses -----------------------------------------------------------------------

def _pearson_parts(pred: np.ndarray, ref: np.ndarray, region: np.ndarray):
    if int(region.sum()) < 2:
        raise DegenerateInputError(f"Pearson depth loss needs >= 2 masked pixels, got {int(region.sum())}")
    p, r = pred[region], ref[region]
    if np.ptp(p) == 0.0 or np.ptp(r) == 0.0:
        raise DegenerateInputError("Pearson depth loss on a zero-variance depth map")
    pc, rc = p - p.mean(), r - r.mean()
    norm_p, norm_r = np.linalg.norm(pc), np.linalg.norm(rc)
    corr = float(np.clip(pc @ rc / (norm_p * norm_r), -1.0, 1.0))
    return corr, pc, rc, norm_p, norm_r


def _plane(image) -> np.ndarray:
    data = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    return data[:, :, 0] if data.ndim == 3 else data


def pearson_depth_loss(pred, ref, mask) -> float:
    """Negative Pearson correlation of two depth maps over the mask, in [-1, 1]."""
    corr, *_ = _pearson_parts(_plane(pred), _plane(ref), _plane(mask) > 0.5)
    return -corr


def pearson_depth_loss_grad(pred, ref, mask) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. `pred` (zero outside the mask)."""
    p = _plane(pred)
    region = _plane(mask) > 0.5
    corr, pc, rc, norm_p, norm_r = _pearson_parts(p, _plane(ref), region)
    grad = np.zeros_like(p)
    grad[region] = -(rc / (norm_p * norm_r) - corr * pc / (norm_p * norm_p))
    return -corr, grad


# --- state and rendering ----------------------------------------------------------

@dataclass
class SculptState:
    grid: TetGrid
    params: DmtetParams
    optimizer: Adam
    iteration: int = 0
    history: list = field(default_factory=list)

    def extract(self) -> SurfaceExtraction:
        return extract_surface(self.grid, self.params)

    def mesh(self) -> TriMesh:
        return compute_vertex_normals(self.extract().mesh)

    def checkpoint_arrays(self) -> dict:
        arrays = {
            "resolution": np.array([self.grid.resolution], dtype=np.int64),
            "bounds": np.stack(self.grid.bounds),
            "sdf": self.params.sdf,
            "deform": self.params.deform,
            "deform_limit": np.array([self.params.deform_limit]),
            "iteration": np.array([self.iteration], dtype=np.int64),
        }
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def save(self, path: Path) -> None:
        write_sclp(path, self.checkpoint_arrays())


def load_sculpt_state(path: Path, config: GeometryStageConfig) -> SculptState:
    """Grid, parameters and optimizer from params.sclp, history from the losses.csv beside it."""
    path = Path(path)
    arrays = read_sclp(path)
    bounds = arrays["bounds"]
    grid = build_tet_grid(int(arrays["resolution"][0]), (bounds[0], bounds[1]))
    params = DmtetParams(arrays["sdf"].copy(), arrays["deform"].copy(), float(arrays["deform_limit"][0]))
    params.validate(grid)
    optimizer = new_optimizer(config, grid)
    optimizer.load_state_arrays(arrays)
    iteration = int(arrays["iteration"][0]) if "iteration" in arrays else 0
    history = []
    losses = path.parent / "losses.csv"
    if losses.exists():
        history = [row for row in read_loss_csv(losses) if row["iteration"] < iteration]
        if len(history) != iteration:
            logger.warning(f"{losses} holds {len(history)} rows for {iteration} iterations")
    return SculptState(grid, params, optimizer, iteration, history)


@dataclass(frozen=True, eq=False)
class ViewRender:
    extraction: SurfaceExtraction
    mesh: TriMesh
    gbuffer: GBuffer


def render_view(extraction: SurfaceExtraction, camera: Camera) -> ViewRender:
    mesh = compute_vertex_normals(extraction.mesh)
    return ViewRender(extraction, mesh, rasterize(mesh, camera))


def _guidance_image(view: ViewRender, image_kind: str) -> np.ndarray:
    gb = view.gbuffer
    if image_kind == "normal":
        return normal_to_color(shade_normal(gb), gb.mask).data
    return shade_headlight(gb).data


def image_gradients_to_params(state: SculptState, view: ViewRender, *, grad_normal=None, grad_depth=None,
                              grad_silhouette=None, sharpness: float = 2.0, silhouette=None) -> tuple[np.ndarray, np.ndarray]:
    """(d sdf, d deform) from gradients on shade_normal's image, the depth map and the soft mask."""
    grad_vertices = np.zeros_like(view.mesh.positions)
    if view.mesh.is_empty:
        return np.zeros(state.grid.num_vertices), np.zeros((state.grid.num_vertices, 3))
    if grad_normal is not None or grad_depth is not None:
        grads = accumulate_gradients(view.gbuffer, grad_normal=grad_normal, grad_depth=grad_depth)
        grad_vertices += grads.total_positions(view.mesh)
    if grad_silhouette is not None:
        sil = silhouette if silhouette is not None else soft_silhouette(view.mesh, view.gbuffer.camera, sharpness, view.gbuffer)
        grad_vertices += sil.backward(grad_silhouette)
    return marching_tetrahedra_backward(state.grid, state.params, view.extraction, grad_vertices)


def color_gradients_to_params(state: SculptState, view: ViewRender, grad_color: np.ndarray, image_kind: str,
                              sharpness: float) -> tuple[np.ndarray, np.ndarray]:
    """Route a gradient on a normal-colour or headlight image through shading and the soft silhouette.

    Covered pixels move through their normals; the silhouette sees the image
    as mask * colour, with background pixels standing in as mid-gray.
    """
    gb = view.gbuffer
    mask = gb.mask
    image = _guidance_image(view, image_kind)
    if image_kind == "normal":
        grad_normal = np.where(mask[..., None], 0.5 * grad_color, 0.0)
    else:
        grad_normal = headlight_to_normal_grad(gb, grad_color)
    fill = np.where(mask[..., None], image, UNKNOWN_GRAY)
    grad_sil = np.sum(grad_color * fill, axis=2)
    return image_gradients_to_params(state, view, grad_normal=grad_normal, grad_silhouette=grad_sil,
                                     sharpness=sharpness)


# --- reference branch ---------------------------------------------------------------

@dataclass
class LossTerms:
    mask: float = 0.0
    normal: float = 0.0
    depth: float = 0.0
    total: float = 0.0
    grad_sdf: np.ndarray | None = None
    grad_deform: np.ndarray | None = None


def reference_losses(state: SculptState, supervision: ReferenceSupervision, config: GeometryStageConfig,
                     extraction: SurfaceExtraction | None = None) -> LossTerms:
    """lambda_mask * mask MSE + lambda_normal * masked normal MSE + lambda_depth * Pearson depth loss."""
    extraction = extraction if extraction is not None else state.extract()
    view = render_view(extraction, supervision.camera)
    gb = view.gbuffer
    h, w = gb.height, gb.width
    ref_mask = supervision.mask_bool
    terms = LossTerms()
    grad_normal = grad_depth = grad_sil = sil = None

    if config.use_reference_mask and config.lambda_mask > 0.0:
        sil = soft_silhouette(view.mesh, gb.camera, config.silhouette_sharpness, gb)
        diff = sil.image.plane - supervision.mask.plane
        terms.mask = float(np.mean(diff ** 2))
        grad_sil = config.lambda_mask * 2.0 * diff / diff.size

    region = ref_mask & gb.mask
    if config.use_reference_normal and config.lambda_normal > 0.0:
        rendered = normal_to_color(shade_normal(gb), gb.mask).data
        diff = np.where(region[..., None], rendered - supervision.normal_map.data, 0.0)
        count = max(int(ref_mask.sum()), 1)
        terms.normal = float(np.sum(diff ** 2) / count)
        grad_normal = config.lambda_normal * 0.5 * 2.0 * diff / count

    if config.use_reference_depth and config.lambda_depth > 0.0:
        try:
            terms.depth, g = pearson_depth_loss_grad(gb.depth, supervision.depth_map.plane, region)
            grad_depth = config.lambda_depth * g
        except DegenerateInputError as e:
            logger.warning(f"Depth term omitted at iteration {state.iteration}: {e}")
            terms.depth = 0.0

    terms.total = config.lambda_mask * terms.mask + config.lambda_normal * terms.normal + config.lambda_depth * terms.depth
    if any(g is not None for g in (grad_normal, grad_depth, grad_sil)):
        terms.grad_sdf, terms.grad_deform = image_gradients_to_params(
            state, view, grad_normal=grad_normal, grad_depth=grad_depth, grad_silhouette=grad_sil,
            sharpness=config.silhouette_sharpness, silhouette=sil)
    else:
        terms.grad_sdf = np.zeros(state.grid.num_vertices)
        terms.grad_deform = np.zeros((state.grid.num_vertices, 3))
    logger.debug(f"reference losses at {w}x{h}: mask {terms.mask:.5f} normal {terms.normal:.5f} depth {terms.depth:.5f}")
    return terms


# --- sculpting loop -------------------------------------------------------------------

@dataclass
class SculptContext:
    """Everything a sculpt step reads but does not own."""
    config: GeometryStageConfig
    provider: GuidanceProvider
    bundle: ConditionBundle
    render_size: int
    supervision: ReferenceSupervision | None = None
    landmarks: object = None
    look_at: tuple = (0.0, 0.0, 0.0)
    cfg_scale: float = DEFAULT_CFG_SCALE
    second_provider: GuidanceProvider | None = None
    seed: int = 0

    def __post_init__(self):
        self.schedule = make_schedule(self.config.diffusion_steps)
        self.t_sampler = TimestepSampler(self.schedule, max(1, self.config.refine_iterations),
                                         self.config.t_min_frac, self.config.t_max_frac, self.config.t_anneal_to)
        self.ranges = self.config.camera_ranges.to_ranges(self.look_at, (self.render_size, self.render_size))
        if self.config.guidance_mode == "vsd" and self.second_provider is None:
            self.second_provider = StaticTargetProvider()


def base_learning_rates(config: GeometryStageConfig, grid: TetGrid) -> dict[str, float]:
    """Configured rates are per REFERENCE_CELL_EDGE; coarser grids take proportionally larger steps."""
    scale = grid.cell_edge / REFERENCE_CELL_EDGE
    return {"sdf": config.lr_sdf * scale, "deform": config.lr_deform * scale}


def learning_rates(config: GeometryStageConfig, grid: TetGrid, iteration: int) -> dict[str, float]:
    progress = min(iteration / max(1, config.refine_iterations), 1.0)
    factor = 1.0 - (1.0 - config.lr_end_fraction) * progress
    return {name: lr * factor for name, lr in base_learning_rates(config, grid).items()}


def new_optimizer(config: GeometryStageConfig, grid: TetGrid) -> Adam:
    return Adam(base_learning_rates(config, grid))


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Generator for one refinement iteration; depends on nothing but (seed, iteration)."""
    return np.random.default_rng([seed, iteration])


def _adam_update(state: SculptState, grad_sdf: np.ndarray, grad_deform: np.ndarray) -> None:
    state.optimizer.step({"sdf": state.params.sdf, "deform": state.params.deform},
                         {"sdf": grad_sdf, "deform": grad_deform})
    project_deform(state.params, state.grid)


def _guidance_branch(state: SculptState, ctx: SculptContext, extraction: SurfaceExtraction,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    cfg = ctx.config
    camera = sample_camera(ctx.ranges, rng)
    view = render_view(extraction, camera)
    x0 = _guidance_image(view, cfg.guidance_image)
    bundle = view_bundle(ctx.bundle, view.gbuffer, ctx.landmarks, render_mode=cfg.guidance_image,
                         identity_conditions=cfg.guidance_mode != "sds")
    if cfg.guidance_mode == "vsd":
        if isinstance(ctx.second_provider, StaticTargetProvider):
            ctx.second_provider.set_target(x0)
        grad, t = vsd_gradient(x0, bundle, ctx.provider, ctx.second_provider, ctx.schedule, ctx.t_sampler, rng,
                               ctx.cfg_scale, state.iteration)
    else:
        grad, t = sds_gradient(x0, bundle, ctx.provider, ctx.schedule, ctx.t_sampler, rng, ctx.cfg_scale,
                               state.iteration)
    grad = cfg.lambda_isd * grad
    g_sdf, g_def = color_gradients_to_params(state, view, grad, cfg.guidance_image, cfg.silhouette_sharpness)
    metrics = {"t": t, "azimuth": camera.azimuth, "elevation": camera.elevation,
               "isd_grad_norm": float(np.linalg.norm(grad))}
    return g_sdf, g_def, metrics


def sculpt_step(state: SculptState, ctx: SculptContext, rng: np.random.Generator | None = None) -> dict:
    """One refinement iteration: reference branch, guidance branch or both, then Adam.

    Without an explicit `rng` the draws come from (ctx.seed, iteration).
    """
    cfg = ctx.config
    it = state.iteration
    rng = rng if rng is not None else iteration_rng(ctx.seed, it)
    both = ctx.supervision is not None and it < cfg.both_branches_fraction * cfg.refine_iterations
    use_ref = ctx.supervision is not None and (both or rng.random() < cfg.reference_probability)
    use_guidance = both or not use_ref

    extraction = state.extract()
    grad_sdf = np.zeros(state.grid.num_vertices)
    grad_deform = np.zeros((state.grid.num_vertices, 3))
    metrics = {"iteration": it, "branch": "both" if both else ("reference" if use_ref else "guidance"),
               "mask": "", "normal": "", "depth": "", "reference_total": "", "t": "", "isd_grad_norm": ""}
    try:
        if use_ref:
            terms = reference_losses(state, ctx.supervision, cfg, extraction)
            grad_sdf += terms.grad_sdf
            grad_deform += terms.grad_deform
            metrics.update(mask=terms.mask, normal=terms.normal, depth=terms.depth, reference_total=terms.total)
        if use_guidance:
            g_sdf, g_def, m = _guidance_branch(state, ctx, extraction, rng)
            grad_sdf += g_sdf
            grad_deform += g_def
            metrics.update(t=m["t"], isd_grad_norm=m["isd_grad_norm"])
    except SculptError as e:
        raise StageError("geometry", it, e) from e

    state.optimizer.lrs = learning_rates(cfg, state.grid, it)
    _adam_update(state, grad_sdf, grad_deform)
    state.iteration += 1
    metrics["surface_vertices"] = extraction.mesh.num_vertices
    state.history.append(metrics)
    return metrics


# --- fit ------------------------------------------------------------------------------

def _check_inside(mesh: TriMesh, lo: float, hi: float) -> None:
    mn, mx = mesh.bounds()
    if np.any(mn <= lo) or np.any(mx >= hi):
        raise InvalidArgumentError(f"Initial mesh bounds {mn.round(4).tolist()} .. {mx.round(4).tolist()} "
                                   f"exceed the grid bounds [{lo}, {hi}]^3")


def fit_dmtet_to_initial(initial_mesh: TriMesh, config: GeometryStageConfig, render_size: int = 128,
                         seed: int = 0, threads: int = 1, look_at=(0.0, 0.0, 0.0)) -> SculptState:
    """SDF of the initial mesh on the grid, then a multi-view normal-map fit against its renders."""
    if initial_mesh.is_empty:
        raise InvalidArgumentError("Initial mesh is empty")
    lo, hi = config.grid_bounds
    _check_inside(initial_mesh, lo, hi)
    grid = build_tet_grid(config.grid_resolution, ((lo, lo, lo), (hi, hi, hi)))
    sdf = MeshSdf(initial_mesh, threads=threads).distance(grid.vertices)
    params = init_params(grid, sdf, config.deform_limit)
    state = SculptState(grid, params, new_optimizer(config, grid))
    logger.info(f"Initialized {grid.num_vertices} grid vertices from the initial mesh SDF")

    if config.fit_iterations == 0:
        return state
    target_mesh = compute_vertex_normals(initial_mesh) if initial_mesh.vertex_normals is None else initial_mesh
    ranges = config.camera_ranges.to_ranges(look_at, (render_size, render_size))
    rng = np.random.default_rng(seed)
    fit_optimizer = new_optimizer(config, grid)
    fit_state = SculptState(grid, params, fit_optimizer)
    for it in range(config.fit_iterations):
        camera = sample_camera(ranges, rng)
        target_gb = rasterize(target_mesh, camera)
        target = normal_to_color(shade_normal(target_gb), target_gb.mask).data
        view = render_view(fit_state.extract(), camera)
        x = _guidance_image(view, "normal")
        diff = x - target
        loss = float(np.mean(diff ** 2))
        g_sdf, g_def = color_gradients_to_params(fit_state, view, 2.0 * diff / diff.size, "normal",
                                                 config.silhouette_sharpness)
        _adam_update(fit_state, g_sdf, g_def)
        if (it + 1) % config.log_every == 0:
            logger.info(f"  fit {it + 1}/{config.fit_iterations}: normal loss {loss:.5f}")
        else:
            logger.debug(f"  fit {it + 1}: normal loss {loss:.6f}")
    # refinement starts with fresh moments
    return SculptState(grid, fit_state.params, new_optimizer(config, grid))


# --- stage ----------------------------------------------------------------------------

@dataclass
class GeometryStageResult:
    mesh: TriMesh
    state: SculptState


LOSS_COLUMNS = ["iteration", "branch", "mask", "normal", "depth", "reference_total", "t", "isd_grad_norm",
                "surface_vertices"]


def write_loss_csv(path: Path, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


_INT_COLUMNS = ("iteration", "t", "surface_vertices")


def read_loss_csv(path: Path) -> list[dict]:
    """Rows as write_loss_csv wrote them; empty cells stay empty strings."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for raw in csv.DictReader(f):
            row = {}
            for key in LOSS_COLUMNS:
                value = raw.get(key, "")
                if value == "" or key == "branch":
                    row[key] = value
                else:
                    row[key] = int(value) if key in _INT_COLUMNS else float(value)
            rows.append(row)
    return rows


def run_geometry_stage(initial_mesh: TriMesh, supervision: ReferenceSupervision | None,
                       provider: GuidanceProvider, config: GeometryStageConfig, bundle: ConditionBundle,
                       render_size: int = 128, seed: int = 0, landmarks=None, threads: int = 1,
                       checkpoint_dir: Path | None = None, state: SculptState | None = None,
                       cfg_scale: float = DEFAULT_CFG_SCALE) -> GeometryStageResult:
    """Fit, sculpt, extract. A given `state` resumes the refinement loop from its iteration."""
    look_at = supervision.camera.look_at if supervision is not None else (0.0, 0.0, 0.0)
    if state is None:
        state = fit_dmtet_to_initial(initial_mesh, config, render_size, seed, threads, look_at)
    ctx = SculptContext(config, provider, bundle, render_size, supervision, landmarks, look_at, cfg_scale, seed=seed)
    logger.info(f"Geometry refinement: {config.refine_iterations} iterations, guidance '{config.guidance_mode}' "
                f"on {config.guidance_image} images")
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    while state.iteration < config.refine_iterations:
        metrics = sculpt_step(state, ctx)
        done = state.iteration
        if done % config.log_every == 0:
            logger.info(f"  sculpt {done}/{config.refine_iterations}: branch {metrics['branch']}, "
                        f"vertices {metrics['surface_vertices']}")
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            write_obj(checkpoint_dir / f"iter_{done:05d}.obj", state.mesh())
            state.save(checkpoint_dir / "params.sclp")
            write_loss_csv(checkpoint_dir / "losses.csv", state.history)

    mesh = state.mesh()
    if mesh.is_empty:
        raise StageError("geometry", state.iteration, InvalidArgumentError("Sculpted surface vanished"))
    if checkpoint_dir is not None:
        write_loss_csv(checkpoint_dir / "losses.csv", state.history)
    logger.info(f"Geometry stage done: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    return GeometryStageResult(mesh, state)
