import numpy as np
import pytest

from errors import InvalidArgumentError
from mesh import TriMesh, make_icosphere
from texture_atlas import TextureState, build_texel_map, dilate_texture, grow_charts, unwrap_uv, with_texture_uvs


@pytest.fixture(scope="module")
def unwrapped():
    return unwrap_uv(make_icosphere(subdivisions=2, radius=0.5), atlas_size=128, gutter=2)


def test_charts_cover_every_face():
    mesh = make_icosphere(subdivisions=2, radius=0.5)
    chart = grow_charts(mesh, angle_threshold=60.0)
    assert len(chart) == mesh.num_faces
    assert chart.min() == 0
    assert len(np.unique(chart)) == chart.max() + 1


def test_unwrap_keeps_geometry_and_fills_the_unit_square(unwrapped):
    mesh, atlas = unwrapped
    original = make_icosphere(subdivisions=2, radius=0.5)
    assert mesh.num_faces == original.num_faces
    np.testing.assert_allclose(mesh.positions, original.positions[atlas.vertex_source])
    assert mesh.uvs.min() >= 0.0 and mesh.uvs.max() <= 1.0
    assert atlas.num_charts >= 2


def test_chart_rectangles_do_not_overlap(unwrapped):
    _, atlas = unwrapped
    lo = atlas.chart_origin
    hi = atlas.chart_origin + atlas.chart_extent
    assert np.all(hi <= atlas.size)
    for a in range(atlas.num_charts):
        for b in range(a + 1, atlas.num_charts):
            separated = np.any((hi[a] <= lo[b]) | (hi[b] <= lo[a]))
            assert separated, f"charts {a} and {b} overlap"


def test_texel_map_points_lie_on_the_surface(unwrapped):
    mesh, _ = unwrapped
    texel_map = build_texel_map(mesh, 128)
    interior = texel_map.mask & np.all(texel_map.bary >= 0.0, axis=-1)
    assert interior.sum() > 1000
    radius = np.linalg.norm(texel_map.point[interior], axis=1)
    assert np.all(radius <= 0.5 + 1e-9) and np.all(radius > 0.45)
    np.testing.assert_allclose(np.linalg.norm(texel_map.normal[texel_map.mask], axis=1), 1.0)


def test_texel_map_needs_uvs():
    with pytest.raises(InvalidArgumentError):
        build_texel_map(make_icosphere(1), 16)


def test_unwrap_rejects_bad_inputs():
    with pytest.raises(InvalidArgumentError):
        unwrap_uv(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 64)
    with pytest.raises(InvalidArgumentError):
        unwrap_uv(make_icosphere(1), atlas_size=5, gutter=2)


def test_dilation_grows_without_touching_covered_texels(rng):
    texels = rng.random((16, 16, 3))
    coverage = np.zeros((16, 16), dtype=bool)
    coverage[6:10, 6:10] = True
    grown, covered = dilate_texture(texels, coverage, iterations=2)
    np.testing.assert_array_equal(grown[coverage], texels[coverage])
    assert covered[4:12, 4:12].all() and covered.sum() == 64
    assert grown[5, 5].min() >= texels[6:10, 6:10].min() - 1e-12


def test_existing_uvs_are_kept(unwrapped):
    mesh, _ = unwrapped
    same, atlas = with_texture_uvs(mesh, 128)
    assert atlas is None
    np.testing.assert_array_equal(same.uvs, mesh.uvs)


def test_coverage_fraction():
    state = TextureState.empty(4)
    state.coverage[0, :2] = True
    assert state.coverage_fraction() == pytest.approx(2 / 16)
    occupied = np.zeros((4, 4), dtype=bool)
    occupied[0] = True
    assert state.coverage_fraction(occupied) == pytest.approx(0.5)
