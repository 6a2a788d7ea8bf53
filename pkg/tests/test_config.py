import pytest

from config import DEFAULT_AZIMUTHS, load_config, load_env, parse_config
from errors import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg.geometry.grid_resolution == 512
    assert cfg.geometry.refine_iterations == 5000
    assert cfg.texture.atlas_size == 1024
    assert cfg.texture.refine_steps == 400
    assert cfg.texture.refine_timestep == 120
    assert cfg.texture.trajectory_azimuths == DEFAULT_AZIMUTHS
    assert cfg.texture.trajectory_elevation == -15.0
    assert cfg.geometry.camera_ranges.elevation == (-20.0, 45.0)
    assert cfg.geometry.camera_ranges.fovy == (30.0, 45.0)
    assert cfg.geometry.camera_ranges.distance == (2.5, 4.0)
    assert cfg.provider.kind == "oracle"


def test_overrides_are_applied():
    cfg = parse_config("seed: 7\ngeometry:\n  grid_resolution: 16\n  guidance_mode: vsd\n")
    assert cfg.seed == 7
    assert cfg.geometry.grid_resolution == 16
    assert cfg.geometry.guidance_mode == "vsd"
    assert cfg.stage_seed("geometry") == 7
    assert cfg.stage_seed("texture") == 8


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError) as info:
        parse_config("fooo: 1\n")
    assert info.value.field == "fooo"


def test_nested_validation_error_names_the_path():
    with pytest.raises(ConfigError) as info:
        parse_config("texture:\n  refine_steps: -3\n")
    assert info.value.field == "texture.refine_steps"


def test_inverted_camera_range_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("geometry:\n  camera_ranges:\n    elevation: [40, -10]\n")
    assert info.value.field.startswith("geometry.camera_ranges")


def test_http_provider_needs_endpoint():
    with pytest.raises(ConfigError):
        parse_config("provider:\n  kind: http\n")


def test_yaml_syntax_error_has_position():
    with pytest.raises(ConfigError) as info:
        parse_config("geometry:\n  grid_resolution: [1, 2\n")
    assert info.value.line is not None
    assert info.value.column is not None


def test_top_level_must_be_a_mapping():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")


def test_canonical_yaml_reparses_to_the_same_hash():
    cfg = parse_config("seed: 3\ntexture:\n  atlas_size: 64\n")
    assert parse_config(cfg.canonical_yaml()).config_hash() == cfg.config_hash()
    assert parse_config("seed: 4\n").config_hash() != cfg.config_hash()


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "lm.txt").write_text("0 0 0\n")
    (tmp_path / "run.yaml").write_text("paths:\n  landmarks: lm.txt\n  output_dir: out\n")
    cfg = load_config(tmp_path / "run.yaml")
    assert cfg.paths.landmarks == tmp_path / "lm.txt"
    assert cfg.paths.output_dir == tmp_path / "out"


def test_missing_referenced_path(tmp_path):
    (tmp_path / "run.yaml").write_text("paths:\n  landmarks: nope.txt\n")
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "run.yaml")
    assert info.value.field == "paths.landmarks"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_env_thread_count(monkeypatch):
    monkeypatch.setenv("SCULPTD_THREADS", "4")
    assert load_env().threads == 4
    monkeypatch.setenv("SCULPTD_THREADS", "many")
    with pytest.raises(ConfigError):
        load_env()
