import numpy as np
import pytest
from scipy import ndimage

from camera import camera_from_spherical
from errors import InvalidArgumentError
from mesh import TriMesh, compute_vertex_normals, make_icosphere
from rasterizer import (accumulate_gradients, headlight_to_normal_grad, project_landmarks, rasterize,
                        rasterize_brute_force, render_turntable, shade_headlight, shade_normal, shade_texture)
from texture_atlas import TextureState


@pytest.fixture
def head():
    return make_icosphere(subdivisions=2, radius=0.5, scale=(1.0, 1.2, 0.9))


def test_rasterizer_matches_brute_force(head):
    camera = camera_from_spherical(30.0, 15.0, 2.5, 40.0, size=(24, 24))
    fast = rasterize(head, camera)
    slow = rasterize_brute_force(head, camera)
    np.testing.assert_array_equal(fast.face_id, slow.face_id)
    np.testing.assert_allclose(fast.depth, slow.depth, atol=1e-12)
    np.testing.assert_allclose(fast.bary, slow.bary, atol=1e-9)
    assert fast.mask.sum() > 50


def test_empty_mesh_renders_background(small_camera):
    gb = rasterize(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), small_camera)
    assert not gb.mask.any()
    assert np.all(gb.depth == 0)


def test_depth_and_normals_face_the_camera(head, small_camera):
    gb = rasterize(head, small_camera)
    normals = shade_normal(gb).data
    interior = ndimage.binary_erosion(gb.mask, iterations=2)
    assert np.all(normals[interior][:, 2] > 0)
    np.testing.assert_allclose(np.linalg.norm(normals[gb.mask], axis=1), 1.0, atol=1e-9)
    assert np.all(gb.depth[gb.mask] > small_camera.distance - 0.7)
    assert np.all(gb.bary[gb.mask] >= -1e-9)
    np.testing.assert_allclose(gb.bary[gb.mask].sum(axis=1), 1.0)


def test_normal_and_depth_gradients_match_finite_differences(head, small_camera, rng):
    base = rasterize(head, small_camera)
    # stay clear of the silhouette, where coverage changes
    interior = ndimage.binary_erosion(base.mask, iterations=2)
    grad_normal = rng.standard_normal(base.mask.shape + (3,)) * interior[..., None]
    grad_depth = rng.standard_normal(base.mask.shape) * interior

    def loss(positions):
        gb = rasterize(compute_vertex_normals(TriMesh(positions, head.faces)), small_camera)
        return float(np.sum(grad_normal * shade_normal(gb).data) + np.sum(grad_depth * gb.depth))

    grads = accumulate_gradients(base, grad_normal=grad_normal, grad_depth=grad_depth)
    analytic_full = grads.total_positions(base.mesh)
    direction = rng.standard_normal(head.positions.shape)
    h = 1e-6
    numeric = (loss(head.positions + h * direction) - loss(head.positions - h * direction)) / (2 * h)
    assert np.isclose(np.sum(analytic_full * direction), numeric, rtol=1e-4, atol=1e-6)


def test_headlight_gradient_feeds_normal_z(head, small_camera):
    gb = rasterize(head, small_camera)
    shaded = shade_headlight(gb).data
    assert np.all(shaded[~gb.mask] == 0)
    grad = headlight_to_normal_grad(gb, np.ones(shaded.shape))
    assert np.all(grad[:, :, :2] == 0)
    np.testing.assert_allclose(grad[:, :, 2][gb.mask], 3.0)


def test_texture_lookup_and_texel_gradients(small_camera, rng):
    head = make_icosphere(subdivisions=2, radius=0.5)
    uvs = np.clip(head.positions[:, :2] + 0.5, 0, 1)
    mesh = head.with_uvs(uvs)
    texels = rng.random((16, 16, 3))
    texture = TextureState(texels, np.ones((16, 16), dtype=bool))
    gb = rasterize(mesh, small_camera)
    color, footprint = shade_texture(gb, texture)
    assert footprint.known[gb.mask].all()

    weights = rng.standard_normal(color.data.shape)
    grads = accumulate_gradients(gb, footprint, grad_color=weights)
    bumped = TextureState(texels + 1e-3 * grads.texels, texture.coverage)
    # colour is linear in the texels
    after, _ = shade_texture(gb, bumped)
    gain = np.sum(weights * (after.data - color.data))
    assert np.isclose(gain, 1e-3 * np.sum(grads.texels ** 2))


def test_texture_needs_uvs(head, small_camera):
    with pytest.raises(InvalidArgumentError):
        shade_texture(rasterize(head, small_camera), TextureState(np.zeros((4, 4, 3)), np.ones((4, 4), bool)))


def test_colour_gradient_needs_footprint(head, small_camera):
    gb = rasterize(head, small_camera)
    with pytest.raises(InvalidArgumentError):
        accumulate_gradients(gb, grad_color=np.zeros((48, 48, 3)))


def test_hidden_landmarks_are_not_drawn(head, small_camera):
    front = small_camera.position / np.linalg.norm(small_camera.position) * 0.45
    image = project_landmarks(np.stack([front, -front]), small_camera, rasterize(head, small_camera))
    visible_only = project_landmarks(front[None], small_camera)
    np.testing.assert_allclose(image.data, visible_only.data)
    assert image.data.max() == 1.0


def test_turntable_without_texture_is_normal_coloured(head, small_camera):
    renders = render_turntable(head, None, [small_camera, small_camera.with_size(16, 16)])
    assert renders[0].data.shape == (48, 48, 3)
    assert renders[1].data.shape == (16, 16, 3)
    assert renders[0].data.min() >= 0 and renders[0].data.max() <= 1
