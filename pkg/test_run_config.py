#!/usr/bin/env python3
"""
Tests for run configuration loading, overrides and the effective-config echo.
"""

import json
import os

import pytest

from run_config import (EFFECTIVE_CONFIG_NAME, ConfigError, RunConfig, apply_overrides,
                        config_from_dict, load_run_config, save_run_config)

TEST_CONFIG = os.path.join(os.path.dirname(__file__), "test_data", "test_config.yaml")


def test_defaults():
    config = load_run_config()
    assert config == RunConfig()
    assert config.model.latent_dim == 16
    assert config.chords.gamma == 0.5
    assert config.render.format == "svg"
    assert config.seed is None


def test_yaml_document():
    config = load_run_config(TEST_CONFIG)
    assert config.seed == 1234
    assert config.model.seed == 1234 and config.train.seed == 1234
    assert config.train.max_steps == 200
    assert config.pipeline.shuffle is True
    assert config.pipeline.progress is False
    assert config.latent.temperature == 0.2


def test_missing_sections_use_defaults():
    config = config_from_dict({"train": {"batch_size": 4}})
    assert config.train.batch_size == 4
    assert config.model == RunConfig().model


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"latent_size": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": [1, 2]})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": "abc"})


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"lr_floor": 1.0, "lr_start": 0.1}})
    with pytest.raises(ConfigError):
        config_from_dict({"chords": {"gamma": 0.0}})


def test_overrides_win_over_file():
    config = load_run_config(TEST_CONFIG, {"train.max_steps": 3, "render.format": "text",
                                           "pipeline.workers": None})
    assert config.train.max_steps == 3
    assert config.render.format == "text"
    assert config.pipeline.workers == 1
    assert apply_overrides(config, {"seed": 9}).train.seed == 9
    with pytest.raises(ConfigError):
        apply_overrides(config, {"train": 3})
    with pytest.raises(ConfigError):
        apply_overrides(config, {"train.momentum": 0.5})


def test_with_seed():
    config = RunConfig().with_seed(42)
    assert (config.seed, config.model.seed, config.train.seed) == (42, 42, 42)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "absent.yaml"))


def test_unparseable_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_json_document(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"model": {"latent_dim": 4}, "seed": 2}))
    config = load_run_config(str(path))
    assert config.model.latent_dim == 4 and config.model.seed == 2


def test_save_echoes_effective_config(tmp_path):
    config = load_run_config(TEST_CONFIG, {"train.max_steps": 7})
    path = save_run_config(config, str(tmp_path / "run"))
    assert os.path.basename(path) == EFFECTIVE_CONFIG_NAME
    with open(path, encoding="utf-8") as f:
        document = json.load(f)
    assert document["train"]["max_steps"] == 7
    assert config_from_dict(document) == config
