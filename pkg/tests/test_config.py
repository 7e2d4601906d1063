import json

import pytest
import yaml

from config.config_manager import SCHEMA_VERSION, ConfigManager, _coerce, default_config
from core.errors import ConfigError


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for key in ("THREADS", "LOG_LEVEL", "OUT_DIR", "SEED"):
        monkeypatch.delenv("VERIFSCOPE_" + key, raising=False)
    return tmp_path


def _write(path, data):
    with open(path, "w", encoding="utf-8") as f:
        if str(path).endswith(".json"):
            json.dump(data, f)
        else:
            yaml.safe_dump(data, f)
    return str(path)


def test_defaults():
    config = ConfigManager(use_env=False)
    assert config.get("SCHEMA_VERSION") == SCHEMA_VERSION
    assert config.get("SEED") == 0
    assert config.section("model")["n_layers"] == 6
    assert config.section("heads")["threshold"] == pytest.approx(0.10)
    assert config.get_all() == default_config()


def test_file_overrides_are_merged(isolated):
    path = _write(isolated / "run.yaml", {"SEED": 7, "data": {"count": 10}})
    config = ConfigManager(path, use_env=False)
    assert config.get("SEED") == 7
    assert config.section("data")["count"] == 10
    assert config.section("data")["n_failures_max"] == 3


def test_json_file(isolated):
    path = _write(isolated / "run.json", {"train": {"max_steps": 3}})
    assert ConfigManager(path, use_env=False).section("train")["max_steps"] == 3


def test_default_location_is_picked_up(isolated):
    _write(isolated / "verifscope.yaml", {"OUT_DIR": "elsewhere"})
    assert ConfigManager(use_env=False).get("OUT_DIR") == "elsewhere"


@pytest.mark.parametrize("data", [
    {"no_such_section": {}},
    {"data": {"no_such_key": 1}},
    {"data": 5},
    {"SCHEMA_VERSION": 99},
])
def test_invalid_files(isolated, data):
    path = _write(isolated / "bad.yaml", data)
    with pytest.raises(ConfigError):
        ConfigManager(path, use_env=False)


def test_unreadable_files(isolated):
    with pytest.raises(ConfigError):
        ConfigManager(str(isolated / "missing.yaml"), use_env=False)
    toml = isolated / "run.toml"
    toml.write_text("SEED = 1\n")
    with pytest.raises(ConfigError):
        ConfigManager(str(toml), use_env=False)
    listing = isolated / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ConfigManager(str(listing), use_env=False)
    broken = isolated / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        ConfigManager(str(broken), use_env=False)


def test_config_error_exit_code():
    assert ConfigError("x").exit_code == 2


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("VERIFSCOPE_THREADS", "4")
    monkeypatch.setenv("VERIFSCOPE_LOG_LEVEL", "DEBUG")
    config = ConfigManager()
    assert config.get("THREADS") == 4
    assert config.get("LOG_LEVEL") == "DEBUG"


def test_file_wins_over_environment(isolated, monkeypatch):
    monkeypatch.setenv("VERIFSCOPE_SEED", "3")
    path = _write(isolated / "run.yaml", {"SEED": 11})
    assert ConfigManager(path).get("SEED") == 11


@pytest.mark.parametrize("raw,value", [
    ("true", True), ("No", False), ("12", 12), ("0.5", 0.5), ("./out", "./out"),
])
def test_coerce(raw, value):
    assert _coerce(raw) == value


def test_stage_seed_inherits_top_level_seed():
    config = ConfigManager(use_env=False)
    config.set("SEED", 42)
    assert config.section("data")["seed"] == 42
    config.merge({"data": {"seed": 5}})
    assert config.section("data")["seed"] == 5
    assert "seed" not in config.section("heads")


def test_missing_seed_is_a_config_error():
    config = ConfigManager(use_env=False)
    config.set("SEED", None)
    with pytest.raises(ConfigError):
        config.section("train")
    with pytest.raises(ConfigError):
        config.section("nope")


def test_section_is_a_copy():
    config = ConfigManager(use_env=False)
    config.section("capture")["fields"].append("resid")
    assert config.section("capture")["fields"] == ["hidden", "attention", "glu"]


def test_digest_ignores_unhashed_keys():
    a = ConfigManager(use_env=False)
    b = ConfigManager(use_env=False)
    b.merge({"OUT_DIR": "other", "THREADS": 8, "LOG_LEVEL": "DEBUG"})
    assert a.digest() == b.digest()
    b.merge({"data": {"count": 5}})
    assert a.digest() != b.digest()
    assert len(a.digest()) == 64


def test_save_and_reload(isolated):
    config = ConfigManager(use_env=False)
    config.merge({"SEED": 9, "glu": {"k": 7}})
    for name in ("saved.yaml", "saved.json"):
        path = str(isolated / name)
        config.save(path)
        assert ConfigManager(path, use_env=False).digest() == config.digest()
    with pytest.raises(ConfigError):
        config.save(str(isolated / "saved.txt"))
