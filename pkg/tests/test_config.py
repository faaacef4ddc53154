from __future__ import annotations

import pytest

from vdtsal.config import ConfigMap, load_config, parse_config_text
from vdtsal.errors import ConfigError


def test_parse_basic_and_comments():
    values = parse_config_text(
        "a = 1\n"
        "# full-line comment\n"
        "b = hello world  # trailing comment\n"
        "\n"
        "depth.drop_object_prob = 0.5\n"
    )
    assert values == {"a": "1", "b": "hello world", "depth.drop_object_prob": "0.5"}


def test_parse_rejects_junk_line():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("not an assignment\n")


def test_parse_rejects_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config_text("a = 1\na = 2\n")


def test_parse_rejects_empty_key():
    with pytest.raises(ConfigError, match="empty key"):
        parse_config_text(" = 3\n")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.cfg"))


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "ok.cfg"
    path.write_text("x = 7\n")
    cfg = load_config(str(path))
    assert cfg.get_int("x") == 7
    assert cfg.source == str(path)


def test_typed_getters():
    cfg = ConfigMap({"i": "3", "f": "0.25", "bt": "yes", "bf": "off", "s": "abc"})
    assert cfg.get_int("i") == 3
    assert cfg.get_float("f") == 0.25
    assert cfg.get_bool("bt") is True
    assert cfg.get_bool("bf") is False
    assert cfg.get_str("s") == "abc"
    assert cfg.unused_keys() == []


def test_typed_getter_errors():
    cfg = ConfigMap({"i": "x", "f": "y", "b": "maybe", "c": "bad"})
    with pytest.raises(ConfigError, match="must be an integer"):
        cfg.get_int("i")
    with pytest.raises(ConfigError, match="must be a number"):
        cfg.get_float("f")
    with pytest.raises(ConfigError, match="must be a boolean"):
        cfg.get_bool("b")
    with pytest.raises(ConfigError, match="must be one of"):
        cfg.get_str("c", choices=("good", "fine"))


def test_required_and_defaults():
    cfg = ConfigMap({})
    assert cfg.get_int("missing", 5) == 5
    assert cfg.get_str("missing") is None
    with pytest.raises(ConfigError, match="missing required key"):
        cfg.get_str("missing", required=True)


def test_unused_keys_tracking():
    cfg = ConfigMap({"a": "1", "b": "2"})
    cfg.get_int("a")
    assert cfg.unused_keys() == ["b"]
