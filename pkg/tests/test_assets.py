import hashlib

import numpy as np
import pytest

from assets import RunReport, StageReport, export_assets, load_manifest, load_report, loss_curve, render_turntable
from camera import Camera
from errors import AssetWriteError, InvalidArgumentError
from mesh import TriMesh, make_icosphere
from mesh_io import read_obj
from texture_atlas import TextureState, unwrap_uv


@pytest.fixture
def textured(rng):
    mesh, _ = unwrap_uv(make_icosphere(1, 0.5), atlas_size=32)
    return mesh, TextureState(rng.random((32, 32, 3)), rng.random((32, 32)) > 0.3)


@pytest.fixture
def report():
    return RunReport("ab" * 32, 7, {"geometry": StageReport("done", 12.5, [(0, 1.0), (50, 0.5)]),
                                    "texture": StageReport("skipped")},
                     {"chamfer": 0.01, "psnr": None})


def test_export_writes_every_file_and_a_matching_manifest(tmp_path, textured, report):
    mesh, texture = textured
    template = Camera(width=16, height=16)
    renders = render_turntable(mesh, texture, template, views=3)
    manifest = export_assets(report, mesh, texture, renders, tmp_path)

    paths = [entry["path"] for entry in manifest]
    assert paths == ["mesh.obj", "mesh.mtl", "texture.png", "coverage.png",
                     "turntable_00.png", "turntable_01.png", "turntable_02.png", "report.yaml"]
    for entry in manifest:
        payload = (tmp_path / entry["path"]).read_bytes()
        assert entry["sha256"] == hashlib.sha256(payload).hexdigest()
        assert entry["bytes"] == len(payload)
    assert load_manifest(tmp_path) == manifest
    assert "usemtl mesh" in (tmp_path / "mesh.obj").read_text()
    assert read_obj(tmp_path / "mesh.obj").num_faces == mesh.num_faces


def test_untextured_export_skips_the_material(tmp_path, icosphere, report):
    manifest = export_assets(report, icosphere, None, [], tmp_path)
    assert [entry["path"] for entry in manifest] == ["mesh.obj", "report.yaml"]
    assert not (tmp_path / "mesh.mtl").exists()


def test_report_round_trip_and_hash(tmp_path, icosphere, report):
    export_assets(report, icosphere, None, [], tmp_path)
    loaded = load_report(tmp_path / "report.yaml")
    assert loaded.content_hash() == report.content_hash()
    assert loaded.stages["geometry"].loss_curve == [(0, 1.0), (50, 0.5)]
    assert loaded.metrics["psnr"] is None


def test_report_hash_ignores_wall_clock_time(report):
    before = report.content_hash()
    report.stages["geometry"].seconds = 99.0
    assert report.content_hash() == before
    report.metrics["chamfer"] = 0.02
    assert report.content_hash() != before


def test_loss_curve_thins_and_skips_blanks():
    history = [{"iteration": k, "loss": float(10 - k)} for k in range(6)]
    history[2]["loss"] = ""
    assert loss_curve(history, "loss", every=2) == [(0, 10.0), (4, 6.0)]
    assert loss_curve(history, "missing") == []


def test_unwritable_directory_names_the_path(tmp_path, icosphere, report):
    blocker = tmp_path / "taken"
    blocker.write_text("not a directory")
    with pytest.raises(AssetWriteError) as info:
        export_assets(report, icosphere, None, [], blocker)
    assert info.value.path == blocker


def test_turntable_views(textured):
    mesh, texture = textured
    renders = render_turntable(mesh, texture, Camera(azimuth=30.0, width=12, height=10), views=4)
    assert len(renders) == 4
    assert all(r.data.shape == (10, 12, 3) for r in renders)
    with pytest.raises(InvalidArgumentError):
        render_turntable(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), None, Camera())
