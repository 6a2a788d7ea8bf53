import numpy as np

from conftest import sphere_sdf
from marching_tets import extract_surface, marching_tetrahedra, marching_tetrahedra_backward
from mesh import euler_characteristic, face_normals, is_watertight
from tet_grid import build_tet_grid, init_params


def test_sphere_extracts_closed_surface():
    grid = build_tet_grid(32)
    mesh = marching_tetrahedra(grid, init_params(grid, sphere_sdf(grid.vertices, 0.55)))
    assert is_watertight(mesh)
    assert euler_characteristic(mesh) == 2
    radius = np.linalg.norm(mesh.positions, axis=1)
    assert np.all(np.abs(radius - 0.55) < grid.cell_edge)
    centroids = mesh.triangles().mean(axis=1)
    assert np.all(np.sum(face_normals(mesh) * centroids, axis=1) > 0)


def test_single_sign_sdf_gives_empty_mesh():
    grid = build_tet_grid(4)
    assert marching_tetrahedra(grid, init_params(grid, np.ones(grid.num_vertices))).is_empty
    assert marching_tetrahedra(grid, init_params(grid, -np.ones(grid.num_vertices))).is_empty


def test_extraction_is_deterministic(sphere_grid):
    grid, params = sphere_grid
    a = extract_surface(grid, params)
    b = extract_surface(grid, params.copy())
    np.testing.assert_array_equal(a.mesh.faces, b.mesh.faces)
    np.testing.assert_array_equal(a.mesh.positions, b.mesh.positions)


def test_surface_vertices_lie_on_sign_change_edges(sphere_grid):
    grid, params = sphere_grid
    extraction = extract_surface(grid, params)
    assert np.all(params.sdf[extraction.edge_a] < 0)
    assert np.all(params.sdf[extraction.edge_b] >= 0)


def test_backward_matches_finite_differences(sphere_grid, rng):
    grid, params = sphere_grid
    deform = rng.standard_normal((grid.num_vertices, 3))
    limit = params.deform_limit * grid.cell_edge
    params.deform = 0.5 * limit * deform / np.linalg.norm(deform, axis=1).max()
    extraction = extract_surface(grid, params)
    weights = rng.standard_normal(extraction.mesh.positions.shape)

    def loss(p):
        return float(np.sum(weights * extract_surface(grid, p).mesh.positions))

    grad_sdf, grad_deform = marching_tetrahedra_backward(grid, params, extraction, weights)
    d_sdf = 1e-2 * rng.standard_normal(grid.num_vertices)
    d_deform = 1e-2 * rng.standard_normal((grid.num_vertices, 3))
    h = 1e-5
    plus, minus = params.copy(), params.copy()
    plus.sdf += h * d_sdf
    plus.deform += h * d_deform
    minus.sdf -= h * d_sdf
    minus.deform -= h * d_deform
    numeric = (loss(plus) - loss(minus)) / (2 * h)
    analytic = np.sum(grad_sdf * d_sdf) + np.sum(grad_deform * d_deform)
    assert np.isclose(analytic, numeric, rtol=1e-5, atol=1e-8)
