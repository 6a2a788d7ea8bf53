import numpy as np
import pytest

from camera import Camera, CameraRanges, camera_from_spherical, pixel_rays, project_points, sample_camera
from errors import InvalidArgumentError


def test_front_camera_sits_on_positive_z():
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0)
    np.testing.assert_allclose(camera.position, [0, 0, 3], atol=1e-12)
    right, up, forward = camera.basis()
    np.testing.assert_allclose(right, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(up, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(forward, [0, 0, -1], atol=1e-12)


def test_top_down_camera_has_a_basis():
    right, up, forward = camera_from_spherical(0.0, 90.0, 3.0, 40.0).basis()
    assert np.isclose(np.linalg.det(np.stack([right, up, -forward])), 1.0)


def test_projection_matches_pixel_rays():
    camera = camera_from_spherical(35.0, 20.0, 3.5, 38.0, size=(40, 30))
    origin, dirs = pixel_rays(camera)
    points = origin + 2.0 * dirs.reshape(-1, 3)
    proj = project_points(camera, points)
    cols, rows = np.meshgrid(np.arange(40) + 0.5, np.arange(30) + 0.5)
    np.testing.assert_allclose(proj.xy, np.stack([cols.ravel(), rows.ravel()], 1), atol=1e-9)
    assert proj.in_front.all()


def test_projection_jacobian(rng):
    camera = camera_from_spherical(-60.0, 5.0, 3.0, 45.0, size=(64, 64))
    points = rng.uniform(-0.5, 0.5, size=(5, 3))
    proj = project_points(camera, points)
    h = 1e-6
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        numeric = (project_points(camera, points + step).xy - project_points(camera, points - step).xy) / (2 * h)
        np.testing.assert_allclose(proj.jacobian[:, :, axis], numeric, rtol=1e-6, atol=1e-6)


def test_points_behind_are_flagged():
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0)
    assert project_points(camera, np.array([[0.0, 0.0, 5.0]])).in_front.tolist() == [False]


def test_sample_camera_stays_in_ranges(rng):
    ranges = CameraRanges(elevation=(-10, 10), azimuth=(0, 90), fovy=(30, 45), distance=(2.5, 4.0), size=(32, 32))
    for _ in range(50):
        camera = sample_camera(ranges, rng)
        assert -10 <= camera.elevation <= 10 and 0 <= camera.azimuth <= 90
        assert 30 <= camera.fovy <= 45 and 2.5 <= camera.distance <= 4.0
        assert camera.size == (32, 32)


def test_sampling_is_seeded():
    a = sample_camera(CameraRanges(), np.random.default_rng(5))
    b = sample_camera(CameraRanges(), np.random.default_rng(5))
    assert a == b


@pytest.mark.parametrize("kwargs", [{"fovy": 0.0}, {"fovy": 180.0}, {"distance": 0.0}, {"width": 0}])
def test_invalid_camera_rejected(kwargs):
    with pytest.raises(InvalidArgumentError):
        Camera(**kwargs)


def test_inverted_range_rejected():
    with pytest.raises(InvalidArgumentError):
        CameraRanges(elevation=(10.0, -10.0))
