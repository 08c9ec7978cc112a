"""Test config module."""

import json

import pytest
import yaml

from config import Config


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("CXR_LOG_DIR", "CXR_WORKERS", "CXR_SEED"):
        monkeypatch.delenv(name, raising=False)


def _config(tmp_path, data=None, name="config.yaml"):
    path = tmp_path / name
    if data is not None:
        text = json.dumps(data) if name.endswith(".json") else yaml.dump(data)
        path.write_text(text)
    return Config(config_path=path)


def test_defaults_when_file_missing(tmp_path):
    config = _config(tmp_path)
    assert config.get("stage1.lr0") == 1e-3
    assert config.get("stage2.two_phase") is True
    assert config.get("preprocess.clahe_grid") == [8, 8]
    ok, errors = config.validate()
    assert ok, errors


def test_file_merges_over_defaults(tmp_path):
    config = _config(tmp_path, {"stage1": {"epochs": 3}, "pipeline": {"stage1_threshold": 0.3}})
    assert config.get("stage1.epochs") == 3
    assert config.get("stage1.lr0") == 1e-3
    assert config.pipeline_config().stage1_threshold == 0.3


def test_pipeline_dump_dir_follows_preprocess(tmp_path):
    assert _config(tmp_path).pipeline_config().dump_dir is None
    config = _config(tmp_path, {"preprocess": {"dump_dir": "dumps"}})
    assert config.pipeline_config().dump_dir == "dumps"
    config = _config(tmp_path, {"preprocess": {"dump_dir": "dumps"}, "pipeline": {"dump_dir": "own"}})
    assert config.pipeline_config().dump_dir == "own"


def test_json_config(tmp_path):
    config = _config(tmp_path, {"network": {"width_scale": 0.5}}, name="config.json")
    assert config.get("network.width_scale") == 0.5
    assert config.get("network.head_scale") == 1.0


def test_get_missing_key_returns_default(tmp_path):
    config = _config(tmp_path)
    assert config.get("no.such.key", "fallback") == "fallback"


def test_set_and_save(tmp_path):
    config = _config(tmp_path)
    config.set("stage2.phase1_epochs", 2)
    config.set("new.section.value", "x")
    config.save()
    reloaded = Config(config_path=tmp_path / "config.yaml")
    assert reloaded.get("stage2.phase1_epochs") == 2
    assert reloaded.get("new.section.value") == "x"


def test_typed_accessors(tmp_path):
    config = _config(tmp_path, {"preprocess": {"target_size": [64, 64]}, "augment": {"hflip_prob": 0.0}})
    assert config.preprocess_config().target_size == (64, 64)
    assert config.augment_config().hflip_prob == 0.0
    stage2 = config.train_config("stage2")
    assert stage2.two_phase and stage2.phase1_epochs == 15
    with pytest.raises(ValueError):
        config.train_config("stage3")


def test_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("CXR_SEED", "42")
    monkeypatch.setenv("CXR_WORKERS", "6")
    monkeypatch.setenv("CXR_LOG_DIR", str(tmp_path / "logs"))
    config = _config(tmp_path)
    assert config.train_config("stage1").seed == 42
    assert config.pipeline_config().parallelism == 6
    assert config.log_dir == tmp_path / "logs"


def test_dotenv_file_is_read(tmp_path):
    (tmp_path / ".env").write_text("CXR_SEED=7\n")
    config = _config(tmp_path)
    assert config.default_seed == 7


def test_relative_log_dir_under_project_root(tmp_path):
    config = _config(tmp_path, {"output": {"log_dir": "mylogs"}})
    assert config.log_dir == config.project_root / "mylogs"


@pytest.mark.parametrize(
    "data,fragment",
    [
        ({"pipeline": {"stage1_threshold": 1.5}}, "stage1_threshold"),
        ({"stage1": {"lr0": 1e-6}}, "lr0 > min_lr"),
        ({"stage2": {"phase2_epochs": 0}}, "epochs"),
        ({"stage1": {"batch_size": 0}}, "batch_size"),
        ({"data": {"split_fractions": [0.5, 0.5, 0.5]}}, "split_fractions"),
        ({"preprocess": {"clahe_clip": 0.5}}, "clahe_clip"),
        ({"preprocess": {"clahe_grid": [8]}}, "clahe_grid"),
        ({"preprocess": {"target_size": [224, 192]}}, "square"),
        ({"pipeline": {"parallelism": 0}}, "parallelism"),
        ({"stage2": {"compute_dtype": "float16"}}, "stage2.compute_dtype"),
    ],
)
def test_validate_reports_errors(tmp_path, data, fragment):
    ok, errors = _config(tmp_path, data).validate()
    assert not ok
    assert any(fragment in e for e in errors), errors


def test_malformed_yaml(tmp_path):
    (tmp_path / "config.yaml").write_text("stage1: [unclosed\n")
    with pytest.raises(ValueError, match="Cannot parse"):
        Config(config_path=tmp_path / "config.yaml")


def test_top_level_must_be_mapping(tmp_path):
    (tmp_path / "config.yaml").write_text("- a\n- b\n")
    with pytest.raises(ValueError, match="mapping"):
        Config(config_path=tmp_path / "config.yaml")
