"""
Texture stage: reference back-projection, progressive trajectory inpainting
and refinement of the UV texture.

  1. bake the reference portrait into the empty atlas
  2. for every trajectory camera: render the partially coloured view,
     have the provider inpaint the unknown pixels, bake the result into a
     fresh texture and blend it in (covered texels are never overwritten)
  3. refine the texels against provider-refined renders of random views
     (MSE + pyramid gradient loss), plus the reference image whenever the
     reference camera is drawn; geometry stays frozen
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from camera import Camera, camera_from_spherical, project_points, sample_camera
from conditions import ConditionBundle, view_bundle
from config import TextureStageConfig
from diffusion import DiffusionSchedule, make_schedule
from errors import InvalidArgumentError, SculptError, StageError
from guidance import GuidanceProvider, provider_inpaint, provider_refine
from image_io import RasterImage, save_png
from mesh import TriMesh
from optim import Adam
from rasterizer import GBuffer, UNKNOWN_GRAY, accumulate_gradients, rasterize, shade_texture
from texture_atlas import TexelMap, TextureState, UvAtlas, build_texel_map, with_texture_uvs

logger = logging.getLogger(__name__)

BAKE_DEPTH_EPS = 0.02            # times the camera distance
PYRAMID_LEVELS = 4


@dataclass(frozen=True)
class TrajectoryPlan:
    cameras: tuple

    def __post_init__(self):
        if not self.cameras:
            raise InvalidArgumentError("Trajectory needs at least the reference camera")

    @property
    def reference(self) -> Camera:
        return self.cameras[0]

    def __len__(self) -> int:
        return len(self.cameras)


def plan_trajectory(reference_camera: Camera, config: TextureStageConfig) -> TrajectoryPlan:
    """Reference camera, then the configured azimuths (relative to it), then the top view."""
    azimuths = list(config.trajectory_azimuths)
    if config.trajectory_order == "surround":
        azimuths = sorted(azimuths, key=lambda a: a % 360.0)
    ref = reference_camera

    def at(azimuth: float, elevation: float) -> Camera:
        return camera_from_spherical(ref.azimuth + azimuth, elevation, ref.distance, ref.fovy,
                                     ref.look_at, (ref.width, ref.height))

    cameras = [ref] + [at(a, config.trajectory_elevation) for a in azimuths]
    if config.include_top_view:
        cameras.append(at(config.top_view_azimuth, config.top_view_elevation))
    return TrajectoryPlan(tuple(cameras))


# --- baking ---------------------------------------------------------------------

def _sample_bilinear(image: RasterImage, xy: np.ndarray) -> np.ndarray:
    coords = np.stack([xy[:, 1] - 0.5, xy[:, 0] - 0.5])
    return np.stack([ndimage.map_coordinates(image.data[:, :, c], coords, order=1, mode="nearest")
                     for c in range(image.channels)], axis=1)


def visible_texels(texel_map: TexelMap, camera: Camera, gbuffer: GBuffer,
                   grazing_angle: float = 75.0) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of texels seen by `camera` and their screen positions.

    A texel is seen when its point projects inside the image onto a covered
    pixel, is no deeper than that pixel's depth plus a tolerance, and its
    normal is within `grazing_angle` of the direction to the camera.
    """
    flat = np.flatnonzero(texel_map.mask.reshape(-1))
    if len(flat) == 0:
        return flat, np.zeros((0, 2))
    points = texel_map.point.reshape(-1, 3)[flat]
    normals = texel_map.normal.reshape(-1, 3)[flat]
    proj = project_points(camera, points)
    x, y = proj.xy[:, 0], proj.xy[:, 1]
    inside = proj.in_front & (x >= 0.0) & (x < camera.width) & (y >= 0.0) & (y < camera.height)
    col = np.clip(np.floor(x).astype(np.int64), 0, camera.width - 1)
    row = np.clip(np.floor(y).astype(np.int64), 0, camera.height - 1)
    covered = gbuffer.mask[row, col]
    unoccluded = proj.depth <= gbuffer.depth[row, col] + BAKE_DEPTH_EPS * camera.distance

    to_eye = camera.position - points
    to_eye /= np.maximum(np.linalg.norm(to_eye, axis=1, keepdims=True), 1e-300)
    facing = np.einsum("ij,ij->i", normals, to_eye) > np.cos(np.radians(grazing_angle))
    keep = inside & covered & unoccluded & facing
    return flat[keep], proj.xy[keep]


def bake_view(state: TextureState, image: RasterImage, camera: Camera, mesh: TriMesh,
              texel_map: TexelMap, gbuffer: GBuffer | None = None,
              grazing_angle: float = 75.0) -> TextureState:
    """Write view colours into visible, not yet covered texels."""
    if (image.width, image.height) != (camera.width, camera.height):
        raise InvalidArgumentError(f"Image {image.width}x{image.height} does not match camera "
                                   f"{camera.width}x{camera.height}")
    gbuffer = gbuffer if gbuffer is not None else rasterize(mesh, camera)
    seen, xy = visible_texels(texel_map, camera, gbuffer, grazing_angle)
    fresh = ~state.coverage.reshape(-1)[seen]
    seen, xy = seen[fresh], xy[fresh]

    baked = state.copy()
    channels = baked.texels.shape[2]
    colors = _sample_bilinear(image, xy) if len(seen) else np.zeros((0, image.channels))
    if colors.shape[1] != channels:
        colors = np.repeat(colors[:, :1], channels, axis=1)
    baked.texels.reshape(-1, channels)[seen] = colors
    baked.coverage.reshape(-1)[seen] = True
    baked.generation += 1
    logger.debug(f"Baked {len(seen)} texels from view az={camera.azimuth:.0f} el={camera.elevation:.0f}")
    return baked


def blend_texture(previous: TextureState, baked: TextureState) -> TextureState:
    """Covered texels keep their value; the rest come from the freshly baked texture."""
    if previous.texels.shape != baked.texels.shape:
        raise InvalidArgumentError(f"Texture sizes differ: {previous.texels.shape} vs {baked.texels.shape}")
    m = previous.coverage[..., None]
    texels = np.where(m, previous.texels, baked.texels)
    return TextureState(texels, previous.coverage | baked.coverage, previous.generation + 1)


def render_partial(state: TextureState, camera: Camera, mesh: TriMesh,
                   gbuffer: GBuffer | None = None) -> tuple[RasterImage, np.ndarray]:
    """Textured render and its known-pixel mask; unknown pixels are mid-gray."""
    gbuffer = gbuffer if gbuffer is not None else rasterize(mesh, camera)
    color, footprint = shade_texture(gbuffer, state)
    known = footprint.known
    return RasterImage(np.where(known[..., None], color.data, UNKNOWN_GRAY)), known


def inpaint_view(state: TextureState, camera: Camera, mesh: TriMesh, provider: GuidanceProvider,
                 bundle: ConditionBundle, gbuffer: GBuffer | None = None, landmarks=None) -> RasterImage:
    gbuffer = gbuffer if gbuffer is not None else rasterize(mesh, camera)
    partial, known = render_partial(state, camera, mesh, gbuffer)
    view = view_bundle(bundle, gbuffer, landmarks, render_mode="rgb")
    return provider_inpaint(provider, partial, known, view)


# --- refinement losses ----------------------------------------------------------

_SOBEL_X = [(-1, 1, 1.0), (0, 1, 2.0), (1, 1, 1.0), (-1, -1, -1.0), (0, -1, -2.0), (1, -1, -1.0)]
_SOBEL_Y = [(1, -1, 1.0), (1, 0, 2.0), (1, 1, 1.0), (-1, -1, -1.0), (-1, 0, -2.0), (-1, 1, -1.0)]


def _sobel(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = x.shape[:2]
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = sum(c * p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] for dr, dc, c in _SOBEL_X) / 8.0
    gy = sum(c * p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] for dr, dc, c in _SOBEL_Y) / 8.0
    return gx, gy


def _sobel_adjoint(g_gx: np.ndarray, g_gy: np.ndarray) -> np.ndarray:
    h, w, c = g_gx.shape
    p = np.zeros((h + 2, w + 2, c))
    for (dr, dc, k) in _SOBEL_X:
        p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] += k * g_gx / 8.0
    for (dr, dc, k) in _SOBEL_Y:
        p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w] += k * g_gy / 8.0
    # fold the edge padding back onto the border
    p[1] += p[0]
    p[-2] += p[-1]
    p[:, 1] += p[:, 0]
    p[:, -2] += p[:, -1]
    return p[1:-1, 1:-1]


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2, x.shape[1] // 2
    return x[:2 * h, :2 * w].reshape(h, 2, w, 2, -1).mean(axis=(1, 3))


def _upsample_adjoint(g: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[:2]
    out[:2 * h, :2 * w] = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
    return out


def _as_hwc(image) -> np.ndarray:
    data = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    return data if data.ndim == 3 else data[..., None]


def _pyramid_terms(a: np.ndarray, b: np.ndarray):
    levels = []
    for level in range(PYRAMID_LEVELS):
        if level:
            if min(a.shape[0], a.shape[1]) < 2:
                break
            a, b = _downsample(a), _downsample(b)
        levels.append((a, b))
    return levels


def perceptual_loss(a, b) -> float:
    """Sum over a 4-level pyramid of the mean absolute difference of Sobel gradients.

    Zero exactly when the images differ by a per-level constant.
    """
    x, y = _as_hwc(a), _as_hwc(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"Perceptual loss needs equal shapes, got {x.shape} and {y.shape}")
    total = 0.0
    for la, lb in _pyramid_terms(x, y):
        ax, ay = _sobel(la)
        bx, by = _sobel(lb)
        total += float(np.mean(np.abs(ax - bx)) + np.mean(np.abs(ay - by)))
    return total


def perceptual_loss_backward(a, b) -> np.ndarray:
    """d perceptual_loss / d a, same shape as a."""
    x, y = _as_hwc(a), _as_hwc(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"Perceptual loss needs equal shapes, got {x.shape} and {y.shape}")
    levels = _pyramid_terms(x, y)
    grad = None
    for la, lb in reversed(levels):
        ax, ay = _sobel(la)
        bx, by = _sobel(lb)
        n = ax.size
        g_level = _sobel_adjoint(np.sign(ax - bx) / n, np.sign(ay - by) / n)
        if grad is not None:
            g_level = g_level + _upsample_adjoint(grad, la.shape)
        grad = g_level
    grad = grad if grad is not None else np.zeros_like(x)
    data = a.data if isinstance(a, RasterImage) else np.asarray(a)
    return grad.reshape(data.shape)


# --- refinement -----------------------------------------------------------------

@dataclass
class ReferenceView:
    image: RasterImage
    camera: Camera


@dataclass
class TextureRefiner:
    """Adam on the texels plus what every refinement step needs."""
    state: TextureState
    mesh: TriMesh
    provider: GuidanceProvider
    bundle: ConditionBundle
    reference: ReferenceView
    schedule: DiffusionSchedule
    config: TextureStageConfig
    landmarks: object = None
    optimizer: Adam = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam({"texels": self.config.lr})
        self._ref_gbuffer = rasterize(self.mesh, self.reference.camera)

        cam = self.reference.camera
        self.ranges = self.config.camera_ranges.to_ranges(cam.look_at, (cam.width, cam.height))


def refine_step(refiner: TextureRefiner, rng: np.random.Generator, iteration: int = 0) -> dict:
    """One texel update: refined-image MSE + pyramid gradient loss (+ reference MSE on reference draws)."""
    cfg = refiner.config
    use_ref = rng.random() < cfg.reference_probability
    if use_ref:
        camera, gbuffer = refiner.reference.camera, refiner._ref_gbuffer
    else:
        camera = sample_camera(refiner.ranges, rng)
        gbuffer = rasterize(refiner.mesh, camera)

    x0, footprint = shade_texture(gbuffer, refiner.state)
    view = view_bundle(refiner.bundle, gbuffer, refiner.landmarks, render_mode="rgb")
    x_hat = provider_refine(refiner.provider, x0, cfg.refine_timestep, view, refiner.schedule, rng).data

    n = x0.data.size
    diff = x0.data - x_hat
    mse = float(np.mean(diff ** 2))
    percep = perceptual_loss(x0, x_hat)
    grad = cfg.lambda_mse * 2.0 * diff / n + cfg.lambda_percep * perceptual_loss_backward(x0, x_hat)
    loss = cfg.lambda_mse * mse + cfg.lambda_percep * percep

    ref_mse = 0.0
    if use_ref:
        ref_diff = x0.data - refiner.reference.image.data
        ref_mse = float(np.mean(ref_diff ** 2))
        grad = grad + cfg.lambda_ref * 2.0 * ref_diff / n
        loss += cfg.lambda_ref * ref_mse

    texel_grad = accumulate_gradients(gbuffer, footprint, grad_color=grad).texels
    refiner.optimizer.step({"texels": refiner.state.texels}, {"texels": texel_grad})
    np.clip(refiner.state.texels, 0.0, 1.0, out=refiner.state.texels)
    metrics = {"iteration": iteration, "loss": loss, "mse": mse, "percep": percep,
               "ref_mse": ref_mse, "reference_view": bool(use_ref)}
    refiner.history.append(metrics)
    return metrics


# --- stage ----------------------------------------------------------------------

@dataclass
class TextureStageResult:
    mesh: TriMesh                  # the mesh with UVs the texture belongs to
    state: TextureState
    atlas: UvAtlas | None
    texel_map: TexelMap
    plan: TrajectoryPlan
    history: list


def run_texture_stage(mesh: TriMesh, reference_image: RasterImage, reference_camera: Camera,
                      provider: GuidanceProvider, config: TextureStageConfig, bundle: ConditionBundle,
                      seed: int = 0, landmarks=None, dump_dir: Path | None = None) -> TextureStageResult:
    if mesh.is_empty:
        raise InvalidArgumentError("Texture stage needs a non-empty mesh")
    if (reference_image.width, reference_image.height) != (reference_camera.width, reference_camera.height):
        reference_camera = reference_camera.with_size(reference_image.width, reference_image.height)
    rng = np.random.default_rng(seed)
    mesh, atlas = with_texture_uvs(mesh, config.atlas_size, config.gutter)
    texel_map = build_texel_map(mesh, config.atlas_size)
    occupied = texel_map.mask
    plan = plan_trajectory(reference_camera, config)

    logger.info(f"Texture stage: {len(plan)} trajectory views, atlas {config.atlas_size}, "
                f"{config.refine_steps} refinement steps")
    state = bake_view(TextureState.empty(config.atlas_size), reference_image, reference_camera, mesh,
                      texel_map, grazing_angle=config.grazing_angle)
    logger.info(f"  reference view: coverage {state.coverage_fraction(occupied):.1%}")

    for k, camera in enumerate(plan.cameras[1:], start=1):
        try:
            gbuffer = rasterize(mesh, camera)
            filled = inpaint_view(state, camera, mesh, provider, bundle, gbuffer, landmarks)
            baked = bake_view(TextureState.empty(config.atlas_size), filled, camera, mesh, texel_map,
                              gbuffer, config.grazing_angle)
            state = blend_texture(state, baked)
        except SculptError as e:
            raise StageError("texture", k, e) from e
        if dump_dir is not None:
            dump_dir.mkdir(parents=True, exist_ok=True)
            save_png(dump_dir / f"view_{k:02d}_inpainted.png", filled)
        logger.info(f"  view {k}/{len(plan) - 1} az={camera.azimuth:.0f} el={camera.elevation:.0f}: "
                    f"coverage {state.coverage_fraction(occupied):.1%}")

    history = []
    if config.refine_steps > 0:
        schedule = make_schedule(config.diffusion_steps)
        refiner = TextureRefiner(state, mesh, provider, bundle, ReferenceView(reference_image, reference_camera),
                                 schedule, config, landmarks)
        for it in range(config.refine_steps):
            try:
                metrics = refine_step(refiner, rng, it)
            except SculptError as e:
                raise StageError("texture-refine", it, e) from e
            if (it + 1) % config.log_every == 0:
                logger.info(f"  refine {it + 1}/{config.refine_steps}: loss {metrics['loss']:.5f}")
            else:
                logger.debug(f"  refine {it + 1}: {metrics}")
        state, history = refiner.state, refiner.history
    else:
        logger.info("  refinement skipped (refine_steps = 0)")

    return TextureStageResult(mesh, state, atlas, texel_map, plan, history)
