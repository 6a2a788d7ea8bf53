import numpy as np
import pytest

from errors import InvalidArgumentError
from mesh import (TriMesh, compute_vertex_normals, compute_vertex_normals_backward, euler_characteristic,
                  face_areas, is_watertight, make_icosphere, sample_surface)
from mesh_io import load_mesh, read_obj, write_mtl, write_obj


def test_icosphere_is_closed_and_outward(icosphere):
    assert is_watertight(icosphere)
    assert euler_characteristic(icosphere) == 2
    radial = icosphere.positions / np.linalg.norm(icosphere.positions, axis=1, keepdims=True)
    assert np.all(np.sum(radial * icosphere.vertex_normals, axis=1) > 0.99)


def test_face_index_out_of_range_is_rejected():
    with pytest.raises(InvalidArgumentError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_isolated_vertex_has_no_normal():
    positions = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
    mesh = compute_vertex_normals(TriMesh(positions, [[0, 1, 2]]))
    assert mesh.normal_valid.tolist() == [True, True, True, False]
    np.testing.assert_allclose(mesh.vertex_normals[0], [0, 0, 1])
    np.testing.assert_allclose(mesh.vertex_normals[3], 0.0)


def test_vertex_normal_backward_matches_finite_differences(rng):
    mesh = make_icosphere(subdivisions=1, radius=1.0, scale=(1.0, 0.8, 1.2))
    positions = mesh.positions + 0.05 * rng.standard_normal(mesh.positions.shape)
    weights = rng.standard_normal(positions.shape)

    def loss(p):
        return float(np.sum(weights * compute_vertex_normals(TriMesh(p, mesh.faces)).vertex_normals))

    grad = compute_vertex_normals_backward(TriMesh(positions, mesh.faces), weights)
    direction = rng.standard_normal(positions.shape)
    h = 1e-6
    numeric = (loss(positions + h * direction) - loss(positions - h * direction)) / (2 * h)
    assert np.isclose(np.sum(grad * direction), numeric, rtol=1e-5, atol=1e-7)


def test_sample_surface_follows_face_area():
    # two triangles, one three times the area of the other
    positions = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [5, 0, 0], [2, 2, 0]], dtype=float)
    mesh = TriMesh(positions, [[0, 1, 2], [3, 4, 5]])
    assert np.allclose(face_areas(mesh), [0.5, 3.0])
    points, face_ids = sample_surface(mesh, 7000, seed=3)
    assert abs(np.mean(face_ids == 0) - 0.5 / 3.5) < 0.01
    assert np.all(points[face_ids == 0, 0] + points[face_ids == 0, 1] <= 1.0 + 1e-12)


def test_sample_surface_is_seeded(icosphere):
    a, _ = sample_surface(icosphere, 100, seed=9)
    b, _ = sample_surface(icosphere, 100, seed=9)
    np.testing.assert_array_equal(a, b)


def test_sample_empty_mesh_raises():
    with pytest.raises(InvalidArgumentError):
        sample_surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


def test_obj_keeps_uvs_and_material(tmp_path, icosphere):
    uvs = (icosphere.positions[:, :2] + 0.5).clip(0, 1)
    write_obj(tmp_path / "head.obj", icosphere.with_uvs(uvs), "mesh")
    write_mtl(tmp_path / "head.mtl", "mesh", "texture.png")
    back = read_obj(tmp_path / "head.obj")
    assert back.num_faces == icosphere.num_faces
    np.testing.assert_allclose(back.positions, icosphere.positions, atol=1e-6)
    np.testing.assert_allclose(back.uvs, uvs, atol=1e-6)
    assert "map_Kd texture.png" in (tmp_path / "head.mtl").read_text()


def test_load_mesh_rejects_unknown_extension(tmp_path):
    path = tmp_path / "head.stl"
    path.write_text("solid")
    with pytest.raises(InvalidArgumentError):
        load_mesh(path)
