import numpy as np
import pytest

from camera import camera_from_spherical
from conditions import ConditionBundle
from config import GeometryStageConfig
from diffusion import make_schedule
from errors import DegenerateInputError, InvalidArgumentError, StageError
from geometry_stage import (REFERENCE_CELL_EDGE, ReferenceSupervision, SculptContext, SculptState,
                            color_gradients_to_params, fit_dmtet_to_initial, learning_rates,
                            load_reference_supervision, load_sculpt_state, new_optimizer, pearson_depth_loss,
                            pearson_depth_loss_grad, reference_losses, render_view, run_geometry_stage,
                            save_reference_supervision, sculpt_step, supervision_from_mesh, write_loss_csv)
from guidance import GuidanceProvider, StaticTargetProvider, SyntheticTargetOracle, render_target, sds_gradient
from image_io import RasterImage
from mesh import make_icosphere
from metrics import chamfer_distance
from rasterizer import UNKNOWN_GRAY, normal_to_color, shade_normal
from silhouette import soft_silhouette


def tiny_config(**overrides) -> GeometryStageConfig:
    values = dict(grid_resolution=16, fit_iterations=0, refine_iterations=4, log_every=1, checkpoint_every=2,
                  camera_ranges={"elevation": (-10.0, 20.0), "distance": (3.0, 3.5)})
    values.update(overrides)
    return GeometryStageConfig(**values)


@pytest.fixture
def target_mesh():
    return make_icosphere(subdivisions=3, radius=0.5, scale=(0.9, 1.1, 0.85))


@pytest.fixture
def supervision(target_mesh, small_camera):
    return supervision_from_mesh(target_mesh, small_camera)


@pytest.fixture
def state(sphere_grid):
    grid, params = sphere_grid
    return SculptState(grid, params, new_optimizer(tiny_config(), grid))


class NoCapabilities(GuidanceProvider):
    name = "nothing"

    def predict_epsilon(self, x_t, t, bundle, schedule):
        return np.zeros_like(x_t)


def test_pearson_loss_is_affine_invariant(rng):
    ref = rng.random((16, 16)) + 1.0
    mask = np.ones((16, 16))
    assert pearson_depth_loss(3.0 * ref + 7.0, ref, mask) == pytest.approx(-1.0, abs=1e-9)
    assert pearson_depth_loss(-ref, ref, mask) == pytest.approx(1.0, abs=1e-9)


def test_pearson_loss_on_flat_depth_is_degenerate(rng):
    with pytest.raises(DegenerateInputError):
        pearson_depth_loss(np.ones((8, 8)), rng.random((8, 8)), np.ones((8, 8)))
    with pytest.raises(DegenerateInputError):
        pearson_depth_loss(rng.random((8, 8)), rng.random((8, 8)), np.zeros((8, 8)))


def test_pearson_gradient_matches_finite_differences(rng):
    pred, ref = rng.random((10, 10)), rng.random((10, 10))
    mask = (rng.random((10, 10)) > 0.3).astype(float)
    _, grad = pearson_depth_loss_grad(pred, ref, mask)
    assert np.all(grad[mask == 0] == 0)
    direction = rng.standard_normal(pred.shape)
    h = 1e-6
    numeric = (pearson_depth_loss(pred + h * direction, ref, mask)
               - pearson_depth_loss(pred - h * direction, ref, mask)) / (2 * h)
    assert np.sum(grad * direction) == pytest.approx(numeric, rel=1e-6)


def test_supervision_checks_its_maps(supervision, small_camera):
    with pytest.raises(InvalidArgumentError):
        ReferenceSupervision(supervision.normal_map, supervision.depth_map, supervision.mask,
                             small_camera.with_size(10, 10))
    with pytest.raises(InvalidArgumentError):
        ReferenceSupervision(supervision.normal_map, supervision.depth_map,
                             RasterImage(0.5 * supervision.mask.data), small_camera)


def test_supervision_directory(tmp_path, supervision):
    save_reference_supervision(tmp_path / "ref", supervision)
    loaded = load_reference_supervision(tmp_path / "ref")
    np.testing.assert_array_equal(loaded.mask_bool, supervision.mask_bool)
    np.testing.assert_allclose(loaded.depth_map.plane, supervision.depth_map.plane, rtol=1e-6)
    assert loaded.camera == supervision.camera
    (tmp_path / "ref" / "ref_depth.pfm").unlink()
    with pytest.raises(InvalidArgumentError):
        load_reference_supervision(tmp_path / "ref")


def test_reference_gradient_matches_finite_differences(state, supervision, rng):
    config = tiny_config(use_reference_mask=False)
    terms = reference_losses(state, supervision, config)
    assert terms.normal > 0 and terms.depth > -1.0

    d_sdf = 1e-2 * rng.standard_normal(state.grid.num_vertices)
    h = 1e-5

    def total(sign):
        shifted = SculptState(state.grid, state.params.copy(), state.optimizer)
        shifted.params.sdf += sign * h * d_sdf
        return reference_losses(shifted, supervision, config).total

    numeric = (total(1) - total(-1)) / (2 * h)
    assert np.sum(terms.grad_sdf * d_sdf) == pytest.approx(numeric, rel=1e-3, abs=1e-7)


def test_reference_step_reduces_the_loss(state, supervision):
    config = tiny_config()
    terms = reference_losses(state, supervision, config)
    assert terms.mask > 0
    scale = 1e-6 / np.abs(terms.grad_sdf).max()
    stepped = SculptState(state.grid, state.params.copy(), state.optimizer)
    stepped.params.sdf -= scale * terms.grad_sdf
    assert reference_losses(stepped, supervision, config).total < terms.total


@pytest.mark.parametrize("mode,image", [("isd", "normal"), ("sds", "rgb"), ("vsd", "normal")])
def test_sculpt_steps_record_history(state, supervision, target_mesh, mode, image):
    config = tiny_config(guidance_mode=mode, guidance_image=image)
    ctx = SculptContext(config, SyntheticTargetOracle(gt_mesh=target_mesh), ConditionBundle("head", np.ones(4)),
                        render_size=32, supervision=supervision)
    rng = np.random.default_rng(0)
    first = sculpt_step(state, ctx, rng)
    assert first["branch"] == "both"
    for _ in range(2):
        sculpt_step(state, ctx, rng)
    assert state.iteration == 3 and len(state.history) == 3
    state.params.validate(state.grid)


def test_sculpt_step_wraps_provider_errors(state):
    ctx = SculptContext(tiny_config(), NoCapabilities(), ConditionBundle("head", np.zeros(0)), render_size=16)
    with pytest.raises(StageError) as info:
        sculpt_step(state, ctx, np.random.default_rng(0))
    assert info.value.stage == "geometry"
    assert info.value.iteration == 0


def test_checkpoint_restores_state(tmp_path, state, supervision, target_mesh):
    ctx = SculptContext(tiny_config(), SyntheticTargetOracle(gt_mesh=target_mesh), ConditionBundle("head", np.ones(4)),
                        render_size=16, supervision=supervision)
    sculpt_step(state, ctx, np.random.default_rng(1))
    state.save(tmp_path / "params.sclp")
    restored = load_sculpt_state(tmp_path / "params.sclp", tiny_config())
    assert restored.iteration == 1
    assert restored.optimizer.step_count == 1
    np.testing.assert_array_equal(restored.params.sdf, state.params.sdf)
    np.testing.assert_array_equal(restored.optimizer.m["deform"], state.optimizer.m["deform"])


def test_fit_starts_from_the_initial_mesh_sdf():
    initial = make_icosphere(subdivisions=2, radius=0.5)
    state = fit_dmtet_to_initial(initial, tiny_config(grid_resolution=8, fit_iterations=2), render_size=16)
    center = np.argmin(np.linalg.norm(state.grid.vertices, axis=1))
    assert state.params.sdf[center] < 0
    assert state.iteration == 0
    assert not state.mesh().is_empty


def test_fit_rejects_mesh_outside_the_grid():
    with pytest.raises(InvalidArgumentError):
        fit_dmtet_to_initial(make_icosphere(radius=1.5), tiny_config(grid_resolution=4))


def test_geometry_stage_writes_checkpoints(tmp_path, supervision, target_mesh):
    result = run_geometry_stage(make_icosphere(subdivisions=2, radius=0.5), supervision,
                                SyntheticTargetOracle(gt_mesh=target_mesh), tiny_config(grid_resolution=12),
                                ConditionBundle("head", np.ones(4)), render_size=16, checkpoint_dir=tmp_path)
    assert not result.mesh.is_empty
    assert result.state.iteration == 4
    for name in ("iter_00002.obj", "iter_00004.obj", "params.sclp", "losses.csv"):
        assert (tmp_path / name).exists()
    assert len((tmp_path / "losses.csv").read_text().splitlines()) == 5


def test_learning_rates_scale_with_the_cell_and_decay(sphere_grid):
    grid, _ = sphere_grid
    config = tiny_config(lr_sdf=1e-3, lr_deform=1e-4, lr_end_fraction=0.1, refine_iterations=100)
    scale = grid.cell_edge / REFERENCE_CELL_EDGE
    assert scale == pytest.approx(32.0)
    start = learning_rates(config, grid, 0)
    assert start == pytest.approx({"sdf": 1e-3 * scale, "deform": 1e-4 * scale})
    assert new_optimizer(config, grid).lrs == pytest.approx(start)
    assert learning_rates(config, grid, 50)["sdf"] == pytest.approx(0.55e-3 * scale)
    assert learning_rates(config, grid, 100) == pytest.approx({"sdf": 1e-4 * scale, "deform": 1e-5 * scale})
    assert learning_rates(config, grid, 250) == pytest.approx(learning_rates(config, grid, 100))


def _stage_state(supervision, target_mesh, config, seed, **kwargs):
    return run_geometry_stage(make_icosphere(subdivisions=2, radius=0.5), supervision,
                              SyntheticTargetOracle(gt_mesh=target_mesh), config, ConditionBundle("head", np.ones(4)),
                              render_size=16, seed=seed, **kwargs).state


def test_same_seed_reproduces_the_state_bit_for_bit(supervision, target_mesh):
    config = tiny_config(grid_resolution=12, checkpoint_every=0)
    first, again = _stage_state(supervision, target_mesh, config, 3), _stage_state(supervision, target_mesh, config, 3)
    np.testing.assert_array_equal(first.params.sdf, again.params.sdf)
    np.testing.assert_array_equal(first.params.deform, again.params.deform)
    assert first.history == again.history
    other = _stage_state(supervision, target_mesh, config, 4)
    assert not (np.array_equal(first.params.sdf, other.params.sdf)
                and np.array_equal(first.params.deform, other.params.deform))


def test_resumed_refinement_matches_an_uninterrupted_run(tmp_path, supervision, target_mesh):
    config = tiny_config(grid_resolution=12, refine_iterations=8, checkpoint_every=4, reference_probability=0.5)
    whole = _stage_state(supervision, target_mesh, config, 9, checkpoint_dir=tmp_path / "whole")

    # four steps, then a checkpoint as the stage loop writes it
    split = tmp_path / "split"
    split.mkdir()
    look_at = supervision.camera.look_at
    first_half = fit_dmtet_to_initial(make_icosphere(subdivisions=2, radius=0.5), config, render_size=16, seed=9,
                                      look_at=look_at)
    ctx = SculptContext(config, SyntheticTargetOracle(gt_mesh=target_mesh), ConditionBundle("head", np.ones(4)),
                        16, supervision, look_at=look_at, seed=9)
    for _ in range(4):
        sculpt_step(first_half, ctx)
    first_half.save(split / "params.sclp")
    write_loss_csv(split / "losses.csv", first_half.history)

    resumed = load_sculpt_state(split / "params.sclp", config)
    assert resumed.iteration == 4
    assert [row["iteration"] for row in resumed.history] == [0, 1, 2, 3]
    finished = _stage_state(supervision, target_mesh, config, 9, checkpoint_dir=split, state=resumed)

    assert finished.iteration == whole.iteration == 8
    np.testing.assert_array_equal(finished.params.sdf, whole.params.sdf)
    np.testing.assert_array_equal(finished.params.deform, whole.params.deform)
    assert [row["branch"] for row in finished.history] == [row["branch"] for row in whole.history]
    assert (split / "losses.csv").read_text() == (tmp_path / "whole" / "losses.csv").read_text()


@pytest.mark.parametrize("group", ["sdf", "deform"])
def test_guided_and_reference_gradients_match_finite_differences(state, supervision, target_mesh, rng, group):
    config = tiny_config()
    camera = camera_from_spherical(60.0, 15.0, 3.0, 40.0, size=(32, 32))
    view = render_view(state.extract(), camera)
    mask0 = view.gbuffer.mask
    x0 = normal_to_color(shade_normal(view.gbuffer), mask0).data
    g, _ = sds_gradient(x0, ConditionBundle("head", np.ones(4)),
                        StaticTargetProvider(render_target(target_mesh, camera, "normal")), make_schedule(), None,
                        np.random.default_rng(5), t=300)
    fill0 = np.where(mask0[..., None], x0, UNKNOWN_GRAY)

    terms = reference_losses(state, supervision, config)
    g_sdf, g_def = color_gradients_to_params(state, view, g, "normal", config.silhouette_sharpness)
    analytic = {"sdf": terms.grad_sdf + g_sdf, "deform": terms.grad_deform + g_def}[group]
    assert np.abs(g_sdf).max() > 0

    # reference losses plus the linear functional whose gradient the guidance routing applies
    def total(params):
        shifted = SculptState(state.grid, params, state.optimizer)
        moved = render_view(shifted.extract(), camera)
        color = normal_to_color(shade_normal(moved.gbuffer), moved.gbuffer.mask).data
        sil = soft_silhouette(moved.mesh, camera, config.silhouette_sharpness, moved.gbuffer).image.plane
        return (reference_losses(shifted, supervision, config).total
                + np.sum(mask0[..., None] * g * color) + np.sum(np.sum(g * fill0, axis=2) * sil))

    direction = 1e-2 * rng.standard_normal(analytic.shape)
    h = 1e-5

    def shifted_params(sign):
        params = state.params.copy()
        getattr(params, group)[...] += sign * h * direction
        return params

    numeric = (total(shifted_params(1)) - total(shifted_params(-1))) / (2 * h)
    assert np.sum(analytic * direction) == pytest.approx(numeric, rel=1e-3, abs=1e-7)


@pytest.mark.slow
def test_oracle_guidance_recovers_the_target_shape():
    target = make_icosphere(subdivisions=4, radius=1.0, scale=(0.55, 0.7, 0.6))
    start = make_icosphere(subdivisions=3, radius=0.5)
    supervision = supervision_from_mesh(target, camera_from_spherical(0.0, 10.0, 3.0, 40.0, size=(96, 96)))
    config = GeometryStageConfig(grid_resolution=32, fit_iterations=0, refine_iterations=600, checkpoint_every=0,
                                 log_every=100)
    result = run_geometry_stage(start, supervision, SyntheticTargetOracle(gt_mesh=target), config,
                                ConditionBundle("head", np.ones(4)), render_size=96, seed=0)

    before = chamfer_distance(start, target, samples=4000)
    after = chamfer_distance(result.mesh, target, samples=4000)
    assert after <= 0.2 * before

    ref = [(row["iteration"], row["reference_total"]) for row in result.state.history if row["reference_total"] != ""]
    means = [np.mean([v for i, v in ref if lo <= i < lo + 150]) for lo in range(0, 600, 150)]
    assert all(later <= earlier + 0.05 * abs(earlier) + 0.02 for earlier, later in zip(means, means[1:]))
    assert means[-1] < means[0]
