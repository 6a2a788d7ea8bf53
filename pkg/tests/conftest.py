"""Shared fixtures. Modules live flat under execution/ and import each other by bare name."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "execution"))

from camera import camera_from_spherical  # noqa: E402
from mesh import make_icosphere  # noqa: E402
from tet_grid import build_tet_grid, init_params  # noqa: E402


def sphere_sdf(points: np.ndarray, radius: float, floor: float = 1e-3) -> np.ndarray:
    """Sphere distance with no vertex closer than `floor` to the surface."""
    d = np.linalg.norm(points, axis=1) - radius
    near = np.abs(d) < floor
    d[near] = np.where(d[near] < 0.0, -floor, floor)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def icosphere():
    return make_icosphere(subdivisions=3, radius=0.5)


@pytest.fixture
def small_camera():
    return camera_from_spherical(20.0, 10.0, 3.0, 40.0, size=(48, 48))


@pytest.fixture
def sphere_grid():
    """16^3 grid holding a sphere of radius 0.55."""
    grid = build_tet_grid(16)
    params = init_params(grid, sphere_sdf(grid.vertices, 0.55))
    return grid, params
