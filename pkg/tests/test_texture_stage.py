import numpy as np
import pytest

from camera import camera_from_spherical
from conditions import ConditionBundle
from config import TextureStageConfig
from errors import InvalidArgumentError, StageError
from guidance import PREDICT_EPSILON, GuidanceProvider, SyntheticTargetOracle, render_target
from image_io import RasterImage
from mesh import make_icosphere
from metrics import psnr
from pipeline import procedural_texture
from rasterizer import rasterize
from texture_atlas import TextureState, build_texel_map, unwrap_uv
from texture_stage import (bake_view, blend_texture, perceptual_loss, perceptual_loss_backward, plan_trajectory,
                           render_partial, run_texture_stage, visible_texels)

COLOR = np.array([0.3, 0.6, 0.9])


@pytest.fixture(scope="module")
def scene():
    mesh, _ = unwrap_uv(make_icosphere(subdivisions=2, radius=0.5), atlas_size=64)
    gt = TextureState(np.broadcast_to(COLOR, (64, 64, 3)).copy(), np.ones((64, 64), dtype=bool))
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0, size=(32, 32))
    reference = RasterImage(render_target(mesh, camera, "rgb", gt))
    return mesh, gt, camera, reference


def tiny_config(**overrides) -> TextureStageConfig:
    values = dict(atlas_size=64, refine_steps=3, log_every=1,
                  camera_ranges={"elevation": (-10.0, 20.0), "distance": (3.0, 3.5)})
    values.update(overrides)
    return TextureStageConfig(**values)


class EpsilonOnly(GuidanceProvider):
    name = "eps-only"
    capabilities = frozenset({PREDICT_EPSILON})

    def predict_epsilon(self, x_t, t, bundle, schedule):
        return np.zeros_like(x_t)


def test_default_trajectory():
    reference = camera_from_spherical(10.0, 5.0, 3.0, 40.0)
    plan = plan_trajectory(reference, TextureStageConfig())
    assert len(plan) == 10
    assert plan.reference == reference
    assert plan.cameras[1].azimuth == 10.0 and plan.cameras[1].elevation == -15.0
    assert plan.cameras[-1].elevation == 60.0
    surround = plan_trajectory(reference, TextureStageConfig(trajectory_order="surround", include_top_view=False))
    assert [c.azimuth - 10.0 for c in surround.cameras[1:]] == [0.0, 45.0, 90.0, 135.0, 180.0, -135.0, -90.0, -45.0]


def test_blend_keeps_covered_texels_exactly(rng):
    previous = TextureState(rng.random((8, 8, 3)), rng.random((8, 8)) > 0.5)
    baked = TextureState(rng.random((8, 8, 3)), rng.random((8, 8)) > 0.5)
    blended = blend_texture(previous, baked)
    np.testing.assert_array_equal(blended.texels[previous.coverage], previous.texels[previous.coverage])
    np.testing.assert_array_equal(blended.texels[~previous.coverage], baked.texels[~previous.coverage])
    np.testing.assert_array_equal(blended.coverage, previous.coverage | baked.coverage)
    with pytest.raises(InvalidArgumentError):
        blend_texture(previous, TextureState.empty(4))


def test_bake_fills_visible_texels_with_the_view_colour(scene):
    mesh, _, camera, reference = scene
    texel_map = build_texel_map(mesh, 64)
    baked = bake_view(TextureState.empty(64), reference, camera, mesh, texel_map)
    assert baked.coverage.any()
    seen, _ = visible_texels(texel_map, camera, rasterize(mesh, camera))
    assert set(np.flatnonzero(baked.coverage)) == set(seen)
    assert np.allclose(np.median(baked.texels[baked.coverage], axis=0), COLOR, atol=0.02)


def test_bake_never_overwrites_coverage(scene, rng):
    mesh, _, camera, reference = scene
    texel_map = build_texel_map(mesh, 64)
    start = TextureState(rng.random((64, 64, 3)), np.zeros((64, 64), dtype=bool))
    start.coverage[:32] = True
    baked = bake_view(start, reference, camera, mesh, texel_map)
    np.testing.assert_array_equal(baked.texels[:32], start.texels[:32])


def test_bake_checks_image_size(scene):
    mesh, _, camera, _ = scene
    with pytest.raises(InvalidArgumentError):
        bake_view(TextureState.empty(64), RasterImage(np.zeros((8, 8, 3))), camera, mesh, build_texel_map(mesh, 64))


def test_partial_render_marks_unknown_pixels_gray(scene):
    mesh, _, camera, _ = scene
    image, known = render_partial(TextureState.empty(64), camera, mesh)
    assert not known.any()
    np.testing.assert_allclose(image.data, 0.5)


def test_perceptual_loss_ignores_constant_offsets(rng):
    a = rng.random((32, 32, 3))
    assert perceptual_loss(a, a + 0.2) == pytest.approx(0.0, abs=1e-12)
    assert perceptual_loss(a, rng.random((32, 32, 3))) > 0.0


def test_perceptual_backward_matches_finite_differences(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    grad = perceptual_loss_backward(a, b)
    direction = rng.standard_normal(a.shape)
    h = 1e-7
    numeric = (perceptual_loss(a + h * direction, b) - perceptual_loss(a - h * direction, b)) / (2 * h)
    assert np.sum(grad * direction) == pytest.approx(numeric, rel=1e-5)


def test_texture_stage_covers_the_head(scene):
    mesh, gt, camera, reference = scene
    oracle = SyntheticTargetOracle(gt_mesh=mesh, gt_texture=gt)
    result = run_texture_stage(mesh, reference, camera, oracle, tiny_config(), ConditionBundle("head", np.ones(4)))
    assert len(result.history) == 3
    assert result.state.coverage_fraction(result.texel_map.mask) > 0.7
    covered = result.state.texels[result.state.coverage & result.texel_map.mask]
    assert np.allclose(np.median(covered, axis=0), COLOR, atol=0.05)
    assert result.state.texels.min() >= 0.0 and result.state.texels.max() <= 1.0


def test_coverage_grows_along_the_trajectory(scene):
    mesh, gt, camera, reference = scene
    oracle = SyntheticTargetOracle(gt_mesh=mesh, gt_texture=gt)
    few = run_texture_stage(mesh, reference, camera, oracle, tiny_config(refine_steps=0, trajectory_azimuths=(0.0,),
                                                                          include_top_view=False),
                            ConditionBundle("head", np.ones(4)))
    many = run_texture_stage(mesh, reference, camera, oracle, tiny_config(refine_steps=0),
                             ConditionBundle("head", np.ones(4)))
    assert many.state.coverage_fraction() > few.state.coverage_fraction()
    assert not np.any(few.state.coverage & ~many.state.coverage)


def test_provider_without_inpainting_fails_the_stage(scene):
    mesh, _, camera, reference = scene
    with pytest.raises(StageError) as info:
        run_texture_stage(mesh, reference, camera, EpsilonOnly(), tiny_config(), ConditionBundle("head", np.ones(4)))
    assert info.value.stage == "texture"
    assert info.value.iteration == 1


@pytest.mark.slow
def test_refined_texture_reproduces_the_target_atlas():
    mesh, gt = procedural_texture(make_icosphere(subdivisions=3, radius=0.6, scale=(0.9, 1.1, 0.95)), 128)
    camera = camera_from_spherical(0.0, 5.0, 3.0, 40.0, size=(128, 128))
    reference = RasterImage(render_target(mesh, camera, "rgb", gt))
    config = TextureStageConfig(atlas_size=128, refine_steps=400, refine_timestep=120, log_every=100)
    result = run_texture_stage(mesh, reference, camera, SyntheticTargetOracle(gt_mesh=mesh, gt_texture=gt), config,
                               ConditionBundle("head", np.ones(4)))
    texel_map = result.texel_map
    interior = texel_map.mask & np.all(texel_map.bary >= 0.0, axis=2) & result.state.coverage
    assert interior.sum() > 0.5 * texel_map.mask.sum()
    assert psnr(result.state.texels, gt.texels, interior) > 28.0
