"""Run configuration files (TOML or JSON) with override handling.

Unknown keys are rejected by name so typos fail loudly; command-line
overrides use dotted paths (e.g. optimizer.learning_rate=1e-3) and win
over file values. Every run writes back the fully resolved configuration
as its manifest.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .backbones import BackboneConfig
from .data import SceneSpec
from .regularize import AdjustmentConfig
from .train import OptimizerConfig, RunConfig


class ConfigError(ValueError):
    """Bad configuration file or override; message names the offending key."""


_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "adjustment": AdjustmentConfig,
    "optimizer": OptimizerConfig,
}


def _coerce_tuples(cls, values: dict) -> dict:
    out = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def _build_dataclass(cls, values: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}{key!r}")
    try:
        return cls(**_coerce_tuples(cls, values))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid value under {path or 'top level'}: {err}") from err


def load_raw(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    if path.suffix == ".toml":
        return tomllib.loads(text)
    # unspecified extension: try TOML first, then JSON
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError:
        return json.loads(text)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    return key.strip().split("."), value


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(tree))  # deep copy
    for text in overrides:
        keys, value = parse_override(text)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-section")
        node[keys[-1]] = value
    return out


def run_config_from_dict(tree: dict) -> RunConfig:
    tree = dict(tree)
    tree.pop("data", None)  # dataset section is consumed by gen-data
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section in tree:
            value = tree.pop(section)
            if value is None:
                kwargs[section] = None
            else:
                kwargs[section] = _build_dataclass(cls, value, f"{section}.")
    top = _build_dataclass_partial(RunConfig, tree, kwargs)
    return top


def _build_dataclass_partial(cls, values: dict, preset: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}")
        if key in preset:
            raise ConfigError(f"key {key!r} given both flat and as a section")
    merged = {**values, **preset}
    try:
        return cls(**_coerce_tuples(cls, merged))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid configuration: {err}") from err


def scene_spec_from_dict(tree: dict) -> SceneSpec:
    data = tree.get("data", tree)
    return _build_dataclass(SceneSpec, data, "data.")


def load_run_config(path: str | Path | None, overrides: list[str]) -> RunConfig:
    tree = load_raw(path) if path else {}
    tree = apply_overrides(tree, overrides)
    return run_config_from_dict(tree)


def resolved_manifest(config: RunConfig, extra: dict | None = None) -> str:
    from .train import config_to_dict

    payload = {"run": config_to_dict(config)}
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True)
