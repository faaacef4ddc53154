"""Flat `key = value` config files.

One assignment per line, `#` starts a comment, keys may be dotted
(e.g. `depth.drop_object_prob`). Values are plain strings until a typed
getter coerces them.
"""

from __future__ import annotations

import os

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text, source="config"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return ConfigMap(parse_config_text(text, source=path), source=path)


class ConfigMap:
    """Dict of raw string values with typed, error-reporting getters."""

    def __init__(self, values, source="config"):
        self.values = dict(values)
        self.source = source
        self._used = set()

    def __contains__(self, key):
        return key in self.values

    def _raw(self, key, default, required):
        if key in self.values:
            self._used.add(key)
            return self.values[key]
        if required:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return default

    def get_str(self, key, default=None, required=False, choices=None):
        value = self._raw(key, default, required)
        if value is not None and choices is not None and value not in choices:
            raise ConfigError(
                f"{self.source}: {key} must be one of {sorted(choices)}, got {value!r}"
            )
        return value

    def get_int(self, key, default=None, required=False):
        value = self._raw(key, default, required)
        if value is None or isinstance(value, int):
            return value
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {key} must be an integer, got {value!r}") from exc

    def get_float(self, key, default=None, required=False):
        value = self._raw(key, default, required)
        if value is None or isinstance(value, float):
            return value
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{self.source}: {key} must be a number, got {value!r}") from exc

    def get_bool(self, key, default=None, required=False):
        value = self._raw(key, default, required)
        if value is None or isinstance(value, bool):
            return value
        lowered = value.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{self.source}: {key} must be a boolean, got {value!r}")

    def unused_keys(self):
        return sorted(set(self.values) - self._used)
