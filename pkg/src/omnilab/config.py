"""JSON configuration loading with field-path errors, and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path

from . import __version__


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    """SHA-256 of the canonical (key-sorted, compact) JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _check_value(path, value, hint):
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif hint is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
    elif dataclasses.is_dataclass(hint):
        return build_dataclass(hint, value, path)
    return value


def build_dataclass(cls, data, path: str = ""):
    """Construct ``cls`` from a (possibly partial) dict, recursing into nested
    dataclasses. Unknown keys, wrong types and failed validation all raise
    :class:`ConfigError` naming the offending field."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(sub, f"unknown field (valid: {', '.join(sorted(fields))})")
        v = _check_value(sub, value, hints[key])
        if isinstance(v, list):
            v = tuple(v)
        kwargs[key] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def load_json(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError("", f"{path}: top level must be an object")
    return data


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seeds: list
    started: str
    finished: str
    outputs: dict
    tool_version: str = __version__
    extra: dict = dataclasses.field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
