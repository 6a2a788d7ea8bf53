import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from camera import camera_from_spherical
from errors import AlignmentFailureError, DegenerateConfigurationError, InvalidArgumentError
from landmarks import (LandmarkSet, SimTransform, align_landmarks_to_mesh, estimate_similarity_transform,
                       load_landmarks, save_landmarks)
from mesh import make_icosphere


def test_similarity_transform_is_recovered(rng):
    src = rng.normal(size=(10, 3))
    rotation = Rotation.from_euler("xyz", [20, -35, 60], degrees=True).as_matrix()
    dst = 1.5 * src @ rotation.T + np.array([1.0, 2.0, 3.0])
    transform = estimate_similarity_transform(LandmarkSet(src), LandmarkSet(dst))
    assert transform.scale == pytest.approx(1.5)
    np.testing.assert_allclose(transform.rotation, rotation, atol=1e-9)
    np.testing.assert_allclose(transform.translation, [1, 2, 3], atol=1e-9)
    assert transform.residual < 1e-9
    np.testing.assert_allclose(transform.apply(src), dst, atol=1e-9)


def test_reflections_are_not_returned(rng):
    src = rng.normal(size=(8, 3))
    mirrored = src * np.array([-1.0, 1.0, 1.0])
    transform = estimate_similarity_transform(LandmarkSet(src), LandmarkSet(mirrored))
    assert np.linalg.det(transform.rotation) == pytest.approx(1.0)
    assert transform.residual > 0.1


def test_collinear_points_are_degenerate():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        estimate_similarity_transform(LandmarkSet(line), LandmarkSet(line))


def test_too_few_points():
    pts = np.eye(3)[:2]
    with pytest.raises(InvalidArgumentError):
        estimate_similarity_transform(LandmarkSet(pts), LandmarkSet(pts))


def test_sim_transform_validates_rotation():
    with pytest.raises(InvalidArgumentError):
        SimTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_alignment_snaps_keypoints_onto_the_mesh():
    mesh = make_icosphere(subdivisions=3, radius=0.5)
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0)
    centroids = mesh.triangles().mean(axis=1)
    front = centroids[centroids[:, 2] > 0.35]
    surface = front[np.linspace(0, len(front) - 1, 9).astype(int)]
    # push every point away from the camera by the same factor
    landmarks = LandmarkSet(camera.position + 1.1 * (surface - camera.position))
    keypoints = [0, 2, 4, 6, 8]
    aligned = align_landmarks_to_mesh(landmarks, keypoints, camera, mesh)
    np.testing.assert_allclose(aligned.points, surface, atol=1e-9)


def test_alignment_reports_the_missing_keypoint():
    mesh = make_icosphere(subdivisions=2, radius=0.5)
    camera = camera_from_spherical(0.0, 0.0, 3.0, 40.0)
    points = np.array([[0.1, 0.1, 0.45], [-0.1, 0.1, 0.45], [0.0, -0.1, 0.45], [5.0, 5.0, 0.0]])
    with pytest.raises(AlignmentFailureError) as info:
        align_landmarks_to_mesh(LandmarkSet(points), [0, 1, 3, 2], camera, mesh)
    assert info.value.keypoint_index == 3


def test_keypoint_index_out_of_range():
    with pytest.raises(InvalidArgumentError):
        LandmarkSet(np.zeros((3, 3))).subset([0, 5])


def test_landmark_file(tmp_path, rng):
    landmarks = LandmarkSet(rng.normal(size=(68, 3)))
    save_landmarks(tmp_path / "lm.txt", landmarks)
    np.testing.assert_allclose(load_landmarks(tmp_path / "lm.txt").points, landmarks.points, atol=1e-8)
