"""Experiment configuration: nested JSON files plus dotted-path overrides."""

from __future__ import annotations

import copy
import json


class ConfigError(Exception):
    pass


class Config:
    """Immutable-by-convention nested configuration.

    Values live in a plain nested dict; lookup uses dotted paths
    (``config.get("model.name")``). Missing required keys raise rather
    than silently defaulting.
    """

    def __init__(self, values: dict | None = None):
        self._values = copy.deepcopy(values) if values else {}

    def get(self, path: str, default=None, *, required=False):
        node = self._values
        parts = path.split(".")
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise ConfigError(f"missing config key {'.'.join(parts[:i + 1])!r}")
                return default
            node = node[part]
        return copy.deepcopy(node) if isinstance(node, (dict, list)) else node

    def require(self, path: str):
        return self.get(path, required=True)

    def has(self, path: str) -> bool:
        sentinel = object()
        return self.get(path, sentinel) is not sentinel

    def to_dict(self) -> dict:
        return copy.deepcopy(self._values)

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __repr__(self):
        return f"Config({self._values!r})"


def load_config(path: str) -> Config:
    """Load a JSON config file; parse errors carry line/column."""
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    if not text.strip():
        return Config({})
    try:
        values = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return Config(values)


def dumps(config: Config) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def loads(text: str) -> Config:
    return Config(json.loads(text) if text.strip() else {})


def _parse_value(text: str, existing):
    """Parse an override value, coercing to the existing leaf's type."""
    if isinstance(existing, bool):
        if text.lower() in ("true", "1"):
            return True
        if text.lower() in ("false", "0"):
            return False
        raise ConfigError(f"cannot parse {text!r} as bool")
    if isinstance(existing, int) and not isinstance(existing, bool):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"cannot parse {text!r} as int") from None
    if isinstance(existing, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"cannot parse {text!r} as float") from None
    if isinstance(existing, str):
        return text
    if isinstance(existing, list):
        return json.loads(text)
    # new key: infer via JSON, fall back to string
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def override(config: Config, assignments: list[str]) -> Config:
    """Apply ``dotted.key=value`` assignments, returning a new Config.

    A plain key must already exist; prefix with ``+`` to create one.
    Values are coerced to the existing leaf's type.
    """
    values = config.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        create = key.startswith("+")
        if create:
            key = key[1:]
        parts = key.split(".")
        node = values
        for part in parts[:-1]:
            if part not in node:
                if not create:
                    raise ConfigError(f"unknown config key {key!r} (use +{key}= to create)")
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} traverses a non-map value")
        leaf = parts[-1]
        if leaf not in node and not create:
            raise ConfigError(f"unknown config key {key!r} (use +{key}= to create)")
        node[leaf] = _parse_value(text, node.get(leaf))
    return Config(values)
