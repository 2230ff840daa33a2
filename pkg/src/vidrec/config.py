"""Run configuration: packaged defaults, an optional JSON file, and ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from vidrec.errors import DataError


def default_config() -> dict:
    text = resources.files("vidrec").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    for key, value in extra.items():
        if key not in base:
            raise DataError(f"unknown config key {path}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise DataError(f"config key {path}{key} must be a section")
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in assignment:
        raise DataError(f"override {assignment!r} is not of the form section.key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    node = {}
    leaf = node
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    _merge(cfg, node)


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def resolved(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
