import dataclasses

import pytest

from berrypick.config import (
    RootConfig,
    config_from_dict,
    config_hash,
    load_config,
    resolve_log_level,
    rigid_transform_problem,
    save_config,
)
from berrypick.core.perception import ExtrinsicCalibration
from berrypick.errors import ConfigError, StorageError


def _write(tmp_path, text):
    path = tmp_path / "config.toml"
    path.write_text(text)
    return path


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(_write(tmp_path, "")) == RootConfig()


def test_partial_sections_keep_other_defaults(tmp_path):
    config = load_config(_write(tmp_path, "seed = 7\n[ppo]\niterations = 3\n"))
    assert config.ppo.iterations == 3
    assert config.ppo.gamma == RootConfig().ppo.gamma
    assert config.seed == config.env.seed == 7


def test_unreachable_workspace_names_the_field(tmp_path):
    text = "[env.workspace]\nmin = [1.5, 1.5, 1.5]\nmax = [2.0, 2.0, 2.0]\n"
    with pytest.raises(ConfigError, match="env.workspace.max"):
        load_config(_write(tmp_path, text))


def test_inverted_workspace_is_rejected():
    with pytest.raises(ConfigError, match="env.workspace.min"):
        config_from_dict({"env": {"workspace": {"min": [-0.5, -0.1, 0.5], "max": [-0.6, -0.1, 0.5]}}})


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown config key: ppo.learning_rat"):
        config_from_dict({"ppo": {"learning_rat": 0.1}})


@pytest.mark.parametrize(
    "data, field",
    [
        ({"ppo": {"gamma": 1.5}}, "ppo.gamma"),
        ({"metrics": {"ma_window": 4}}, "metrics.ma_window"),
        ({"metrics": {"jerk_percentile": 100}}, "metrics.jerk_percentile"),
        ({"env": {"weights": {"sigma": 0}}}, "env.weights.sigma"),
        ({"streamer": {"vel_max": [1, 1, 1]}}, "streamer.vel_max"),
        ({"perception": {"extrinsic": [[2, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]}},
         "perception.extrinsic"),
        ({"ppo": {"iterations": "many"}}, "ppo.iterations"),
    ],
)
def test_invalid_values_name_their_field(data, field):
    with pytest.raises(ConfigError, match=field):
        config_from_dict(data)


def test_section_seed_is_rejected():
    with pytest.raises(ConfigError, match="env.seed"):
        config_from_dict({"env": {"seed": 3}})


def test_parse_error_reports_location(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        load_config(_write(tmp_path, "seed = 1\n[ppo\n"))


def test_missing_file_is_a_storage_error(tmp_path):
    with pytest.raises(StorageError):
        load_config(tmp_path / "absent.toml")


def test_saved_config_loads_back_identically(tmp_path):
    config = dataclasses.replace(
        RootConfig(), ppo=dataclasses.replace(RootConfig().ppo, hidden_sizes=(32, 16))
    ).with_seed(11)
    path = tmp_path / "out" / "config.toml"
    save_config(config, path)
    loaded = load_config(path)
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_hash_tracks_content():
    base = RootConfig()
    assert config_hash(base) == config_hash(RootConfig())
    assert config_hash(base) != config_hash(base.with_seed(1))


def test_log_level_env_override(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "debug")
    assert resolve_log_level(RootConfig()) == "DEBUG"
    monkeypatch.delenv("LOG_LEVEL")
    assert resolve_log_level(RootConfig()) == "INFO"


@pytest.mark.parametrize(
    "matrix, problem",
    [
        ([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], None),
        ([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], None),
        ([[2, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], "orthonormal"),
        ([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, -1, 0], [0, 0, 0, 1]], "determinant"),
        ([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0.5, 1]], "bottom row"),
    ],
)
def test_config_and_calibration_share_the_rigid_check(matrix, problem):
    found = rigid_transform_problem(matrix)
    assert (found is None) if problem is None else (problem in found)
    if problem is None:
        config = config_from_dict({"perception": {"extrinsic": matrix}, "arm": {"base_frame": matrix}})
        assert ExtrinsicCalibration.from_config(config.perception).T.shape == (4, 4)
        return
    with pytest.raises(ConfigError, match=f"arm.base_frame: .*{problem}"):
        config_from_dict({"arm": {"base_frame": matrix}})
    with pytest.raises(ConfigError, match=f"perception.extrinsic: .*{problem}"):
        ExtrinsicCalibration(matrix)
