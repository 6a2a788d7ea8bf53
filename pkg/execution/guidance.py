"""
Guidance providers and score-distillation gradient estimators.

A GuidanceProvider houses whatever model predicts noise, inpaints or
refines images. The engine only talks to this contract; the
SyntheticTargetOracle implements it analytically from a ground-truth scene
so every estimator has a closed-form expected value:

    eps_hat = (x_t - sqrt(abar) x_gt) / sqrt(1 - abar)
    eps_hat - eps = sqrt(abar) / sqrt(1 - abar) * (x0 - x_gt)
"""

import logging
from abc import ABC, abstractmethod
from collections import OrderedDict

import numpy as np
from scipy import ndimage

from camera import Camera
from conditions import ConditionBundle
from diffusion import DiffusionSchedule, TimestepSampler, add_noise, recover_x0
from errors import InvalidArgumentError, MissingTargetError, UnsupportedCapabilityError
from image_io import RasterImage
from mesh import TriMesh
from rasterizer import normal_to_color, rasterize, shade_headlight, shade_normal, shade_texture

logger = logging.getLogger(__name__)

PREDICT_EPSILON = "predict_epsilon"
INPAINT = "inpaint"
REFINE = "refine"
DEFAULT_CFG_SCALE = 7.5
DEFAULT_REFINE_TIMESTEP = 120
MAX_CACHED_TARGETS = 64


class GuidanceProvider(ABC):
    name = "provider"
    capabilities: frozenset = frozenset()
    identity_dim: int | None = None
    conditioning: tuple = ()

    def require(self, capability: str) -> None:
        if capability not in self.capabilities:
            raise UnsupportedCapabilityError(self.name, capability)

    def check_bundle(self, bundle: ConditionBundle) -> None:
        if self.identity_dim is not None and bundle.identity_dim not in (0, self.identity_dim):
            raise InvalidArgumentError(
                f"Identity vector has dimension {bundle.identity_dim}, provider '{self.name}' "
                f"expects {self.identity_dim}"
            )

    @property
    def has_unconditional(self) -> bool:
        return False

    @abstractmethod
    def predict_epsilon(self, x_t: np.ndarray, t: int, bundle: ConditionBundle,
                        schedule: DiffusionSchedule) -> np.ndarray:
        """Conditional noise prediction, same shape as x_t."""

    def predict_epsilon_uncond(self, x_t: np.ndarray, t: int, bundle: ConditionBundle,
                               schedule: DiffusionSchedule) -> np.ndarray:
        raise UnsupportedCapabilityError(self.name, "unconditional prediction")

    def inpaint(self, partial: np.ndarray, known_mask: np.ndarray, bundle: ConditionBundle) -> np.ndarray:
        raise UnsupportedCapabilityError(self.name, INPAINT)

    def refine(self, x0: np.ndarray, t: int, bundle: ConditionBundle, schedule: DiffusionSchedule,
               rng: np.random.Generator) -> np.ndarray:
        """Noise x0 to timestep t and return the one-step x0 prediction."""
        self.require(PREDICT_EPSILON)
        eps = rng.standard_normal(x0.shape)
        x_t = add_noise(x0, t, eps, schedule)
        return recover_x0(x_t, t, self.predict_epsilon(x_t, t, bundle, schedule), schedule)


def render_target(mesh: TriMesh, camera: Camera, render_mode: str, texture=None) -> np.ndarray:
    """Normal-colour or RGB render of a scene, background 0; untextured scenes are headlight-shaded."""
    gb = rasterize(mesh, camera)
    if render_mode == "normal":
        return normal_to_color(shade_normal(gb), gb.mask).data
    if texture is None or mesh.uvs is None:
        return shade_headlight(gb).data
    color, _ = shade_texture(gb, texture)
    return color.data


class SyntheticTargetOracle(GuidanceProvider):
    """Analytic provider whose target for camera c is the render of a ground-truth scene."""

    name = "synthetic-oracle"
    capabilities = frozenset({PREDICT_EPSILON, INPAINT, REFINE})
    conditioning = ("landmark_image", "normal_image", "canny_image", "depth_image")

    def __init__(self, gt_mesh: TriMesh | None = None, gt_texture=None, blur: float = 0.0,
                 identity_dim: int | None = None, targets: dict | None = None):
        self.gt_mesh = gt_mesh
        self.gt_texture = gt_texture
        self.blur = float(blur)
        self.identity_dim = identity_dim
        self._targets = dict(targets or {})
        self._rendered = OrderedDict()

    def target(self, camera: Camera | None, render_mode: str = "normal") -> np.ndarray:
        if camera is None:
            raise MissingTargetError("Oracle needs the view camera in the condition bundle")
        key = (camera, render_mode)
        if key in self._targets:
            return self._targets[key]
        if key in self._rendered:
            self._rendered.move_to_end(key)
            return self._rendered[key]
        if self.gt_mesh is None:
            raise MissingTargetError(f"No oracle target for camera {camera} ({render_mode})")
        target = render_target(self.gt_mesh, camera, render_mode, self.gt_texture)
        self._rendered[key] = target
        if len(self._rendered) > MAX_CACHED_TARGETS:
            self._rendered.popitem(last=False)
        return target

    def _target_for(self, x: np.ndarray, bundle: ConditionBundle) -> np.ndarray:
        self.check_bundle(bundle)
        target = self.target(bundle.camera, bundle.render_mode)
        if target.shape != x.shape:
            raise InvalidArgumentError(f"Image shape {x.shape} does not match oracle target {target.shape}")
        return target

    def predict_epsilon(self, x_t, t, bundle, schedule):
        x_gt = self._target_for(x_t, bundle)
        a = schedule.alpha_bar[schedule.check_timestep(t)]
        return (x_t - np.sqrt(a) * x_gt) / np.sqrt(1.0 - a)

    def inpaint(self, partial, known_mask, bundle):
        x_gt = self._target_for(partial, bundle)
        if self.blur > 0.0:
            fill = ndimage.gaussian_filter(x_gt, sigma=(self.blur, self.blur, 0.0), mode="nearest")
        else:
            fill = x_gt
        return np.where(known_mask[..., None], partial, fill)


class StaticTargetProvider(SyntheticTargetOracle):
    """Oracle with one settable target regardless of camera (the VSD second score)."""

    name = "static-target"

    def __init__(self, target: np.ndarray | None = None):
        super().__init__()
        self._static = None if target is None else np.asarray(target, dtype=np.float64)

    def set_target(self, target: np.ndarray) -> None:
        self._static = np.asarray(target, dtype=np.float64).copy()

    def target(self, camera, render_mode="normal"):
        if self._static is None:
            raise MissingTargetError("Static target provider has no target set")
        return self._static


# --- estimators -------------------------------------------------------------------

def _guided_epsilon(provider: GuidanceProvider, x_t: np.ndarray, t: int, bundle: ConditionBundle,
                    schedule: DiffusionSchedule, cfg_scale: float) -> np.ndarray:
    eps_cond = provider.predict_epsilon(x_t, t, bundle, schedule)
    if eps_cond.shape != x_t.shape:
        raise InvalidArgumentError(f"Provider '{provider.name}' returned shape {eps_cond.shape} for {x_t.shape}")
    if not provider.has_unconditional:
        return eps_cond
    eps_uncond = provider.predict_epsilon_uncond(x_t, t, bundle, schedule)
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond)


def sds_gradient(x0: np.ndarray, bundle: ConditionBundle, provider: GuidanceProvider,
                 schedule: DiffusionSchedule, t_sampler: TimestepSampler | None, rng: np.random.Generator,
                 cfg_scale: float = DEFAULT_CFG_SCALE, iteration: int = 0,
                 t: int | None = None) -> tuple[np.ndarray, int]:
    """w(t) (eps_hat - eps) at a sampled (or given) timestep; returns (gradient, t).

    With identity and landmark conditions in the bundle this is the
    identity-aware variant; with a text-only bundle it is plain SDS.
    """
    provider.require(PREDICT_EPSILON)
    x0 = np.asarray(x0, dtype=np.float64)
    if t is None:
        t = t_sampler.sample(rng, iteration) if t_sampler is not None else int(rng.integers(0, schedule.num_steps))
    t = schedule.check_timestep(t)
    eps = rng.standard_normal(x0.shape)
    x_t = add_noise(x0, t, eps, schedule)
    eps_hat = _guided_epsilon(provider, x_t, t, bundle, schedule, cfg_scale)
    return schedule.weight[t] * (eps_hat - eps), t


def vsd_gradient(x0: np.ndarray, bundle: ConditionBundle, provider_main: GuidanceProvider,
                 provider_second: GuidanceProvider, schedule: DiffusionSchedule,
                 t_sampler: TimestepSampler | None, rng: np.random.Generator,
                 cfg_scale: float = DEFAULT_CFG_SCALE, iteration: int = 0,
                 t: int | None = None) -> tuple[np.ndarray, int]:
    """w(t) (eps_main - eps_second) from one shared (t, eps) draw."""
    provider_main.require(PREDICT_EPSILON)
    provider_second.require(PREDICT_EPSILON)
    x0 = np.asarray(x0, dtype=np.float64)
    if t is None:
        t = t_sampler.sample(rng, iteration) if t_sampler is not None else int(rng.integers(0, schedule.num_steps))
    t = schedule.check_timestep(t)
    eps = rng.standard_normal(x0.shape)
    x_t = add_noise(x0, t, eps, schedule)
    eps_main = _guided_epsilon(provider_main, x_t, t, bundle, schedule, cfg_scale)
    eps_second = provider_second.predict_epsilon(x_t, t, bundle, schedule)
    return schedule.weight[t] * (eps_main - eps_second), t


def provider_inpaint(provider: GuidanceProvider, partial_image: RasterImage, known_mask: np.ndarray,
                     bundle: ConditionBundle) -> RasterImage:
    """Provider fill of the unknown pixels; known pixels are composited back bit-exactly."""
    provider.require(INPAINT)
    known = np.asarray(known_mask, dtype=bool)
    if known.shape != partial_image.data.shape[:2]:
        raise InvalidArgumentError(f"Known mask {known.shape} does not match image {partial_image.data.shape[:2]}")
    filled = np.asarray(provider.inpaint(partial_image.data, known, bundle), dtype=np.float64)
    if filled.shape != partial_image.data.shape:
        raise InvalidArgumentError(f"Provider '{provider.name}' inpainted shape {filled.shape}")
    return RasterImage(np.where(known[..., None], partial_image.data, filled))


def provider_refine(provider: GuidanceProvider, x0: RasterImage, t: int, bundle: ConditionBundle,
                    schedule: DiffusionSchedule, rng: np.random.Generator) -> RasterImage:
    provider.require(REFINE)
    t = schedule.check_timestep(t)
    return RasterImage(provider.refine(x0.data, t, bundle, schedule, rng))
