import numpy as np
import pytest

from camera import camera_from_spherical
from conditions import ConditionBundle
from diffusion import make_schedule
from errors import InvalidArgumentError, MissingTargetError, UnsupportedCapabilityError
from guidance import (INPAINT, MAX_CACHED_TARGETS, PREDICT_EPSILON, GuidanceProvider, StaticTargetProvider,
                      SyntheticTargetOracle, provider_inpaint, provider_refine, render_target, sds_gradient,
                      vsd_gradient)
from image_io import RasterImage
from mesh import make_icosphere

SHAPE = (8, 8, 3)


@pytest.fixture
def schedule():
    return make_schedule()


@pytest.fixture
def scene(rng):
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0, size=(8, 8))
    target = rng.random(SHAPE)
    oracle = SyntheticTargetOracle(targets={(camera, "normal"): target})
    bundle = ConditionBundle("head", np.zeros(0), camera=camera)
    return oracle, bundle, target


class EpsilonOnly(GuidanceProvider):
    name = "eps-only"
    capabilities = frozenset({PREDICT_EPSILON})

    def predict_epsilon(self, x_t, t, bundle, schedule):
        return np.zeros_like(x_t)


def test_sds_gradient_has_closed_form(scene, schedule, rng):
    oracle, bundle, target = scene
    x0 = rng.random(SHAPE)
    grad, t = sds_gradient(x0, bundle, oracle, schedule, None, rng, t=300)
    assert t == 300
    expected = schedule.weight[300] * schedule.signal_to_noise(300) * (x0 - target)
    np.testing.assert_allclose(grad, expected, atol=1e-9)


def test_sds_gradient_vanishes_at_the_target(scene, schedule, rng):
    oracle, bundle, target = scene
    grad, _ = sds_gradient(target.copy(), bundle, oracle, schedule, None, rng, t=50)
    np.testing.assert_allclose(grad, 0.0, atol=1e-9)


def test_vsd_second_score_on_current_render_equals_sds(scene, schedule, rng):
    oracle, bundle, _ = scene
    x0 = rng.random(SHAPE)
    sds, _ = sds_gradient(x0, bundle, oracle, schedule, None, np.random.default_rng(3), t=400)
    vsd, _ = vsd_gradient(x0, bundle, oracle, StaticTargetProvider(x0), schedule, None,
                          np.random.default_rng(3), t=400)
    np.testing.assert_allclose(vsd, sds, atol=1e-9)


def test_vsd_with_matching_scores_is_zero(scene, schedule, rng):
    oracle, bundle, target = scene
    vsd, _ = vsd_gradient(rng.random(SHAPE), bundle, oracle, StaticTargetProvider(target), schedule, None, rng,
                          t=700)
    np.testing.assert_allclose(vsd, 0.0, atol=1e-9)


def test_refine_returns_the_target(scene, schedule, rng):
    oracle, bundle, target = scene
    refined = provider_refine(oracle, RasterImage(rng.random(SHAPE)), 120, bundle, schedule, rng)
    np.testing.assert_allclose(refined.data, target, atol=1e-9)


def test_inpaint_keeps_known_pixels_exactly(scene, rng):
    oracle, bundle, target = scene
    partial = rng.random(SHAPE)
    known = rng.random(SHAPE[:2]) > 0.5
    filled = provider_inpaint(oracle, RasterImage(partial), known, bundle)
    np.testing.assert_array_equal(filled.data[known], partial[known])
    np.testing.assert_array_equal(filled.data[~known], target[~known])


def test_blurred_inpaint_differs_from_the_target(rng):
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0, size=(8, 8))
    target = rng.random(SHAPE)
    oracle = SyntheticTargetOracle(blur=1.5, targets={(camera, "normal"): target})
    filled = provider_inpaint(oracle, RasterImage(np.zeros(SHAPE)), np.zeros((8, 8), bool),
                              ConditionBundle("head", np.zeros(0), camera=camera))
    assert not np.allclose(filled.data, target)


def test_missing_capabilities_are_reported(scene, schedule, rng):
    _, bundle, _ = scene
    provider = EpsilonOnly()
    with pytest.raises(UnsupportedCapabilityError) as info:
        provider_inpaint(provider, RasterImage(np.zeros(SHAPE)), np.ones((8, 8), bool), bundle)
    assert info.value.capability == INPAINT
    with pytest.raises(UnsupportedCapabilityError):
        provider_refine(provider, RasterImage(np.zeros(SHAPE)), 10, bundle, schedule, rng)


def test_missing_targets(schedule, rng):
    oracle = SyntheticTargetOracle()
    with pytest.raises(MissingTargetError):
        sds_gradient(np.zeros(SHAPE), ConditionBundle("head", np.zeros(0)), oracle, schedule, None, rng, t=10)
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0, size=(8, 8))
    with pytest.raises(MissingTargetError):
        oracle.target(camera)
    with pytest.raises(MissingTargetError):
        StaticTargetProvider().target(camera)


def test_identity_dimension_must_match(scene, schedule, rng):
    _, bundle, target = scene
    oracle = SyntheticTargetOracle(identity_dim=512, targets={(bundle.camera, "normal"): target})
    wrong = ConditionBundle("head", np.ones(3), camera=bundle.camera)
    with pytest.raises(InvalidArgumentError):
        sds_gradient(np.zeros(SHAPE), wrong, oracle, schedule, None, rng, t=10)


def test_oracle_renders_and_caches_targets():
    oracle = SyntheticTargetOracle(gt_mesh=make_icosphere(subdivisions=1, radius=0.5))
    cameras = [camera_from_spherical(float(az), 0.0, 3.0, 40.0, size=(8, 8)) for az in range(70)]
    first = oracle.target(cameras[0])
    assert first.shape == SHAPE
    for camera in cameras[1:]:
        oracle.target(camera, "rgb")
    assert len(oracle._rendered) == MAX_CACHED_TARGETS


def test_untextured_rgb_target_is_headlight_gray():
    mesh = make_icosphere(subdivisions=2, radius=0.5)
    image = render_target(mesh, camera_from_spherical(0.0, 0.0, 3.0, 40.0, size=(16, 16)), "rgb")
    np.testing.assert_array_equal(image[..., 0], image[..., 1])
    assert image[8, 8, 0] > 0.9
