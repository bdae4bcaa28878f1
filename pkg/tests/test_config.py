import json

import pytest

from potalign.config import ExperimentConfig, load_config
from potalign.errors import ConfigError


def test_defaults_round_trip():
    cfg = ExperimentConfig.from_dict({})
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert set(cfg.to_dict()) == {"world", "solver", "model", "train", "output"}


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="extra"):
        ExperimentConfig.from_dict({"extra": {}})


def test_type_and_value_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"epochs": "ten"}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"reconstruction": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"solver": {"epsilon": -1.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"world": {"side": 4}})  # model.side still 8


def test_sections_feed_train_config():
    cfg = ExperimentConfig.from_dict({"solver": {"epsilon": 0.1, "mass": 0.5}, "model": {"width": 16}})
    assert cfg.train.solver.epsilon == 0.1 and cfg.train.solver.mass == 0.5
    assert cfg.train.model.width == 16


def test_yaml_and_json_files(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  epochs: 3\nworld:\n  seed: 4\n")
    assert load_config(tmp_path / "c.yaml").train.epochs == 3
    (tmp_path / "c.json").write_text(json.dumps({"world": {"seed": 2}}))
    assert load_config(tmp_path / "c.json").world.seed == 2
    (tmp_path / "bad.yaml").write_text("train: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
