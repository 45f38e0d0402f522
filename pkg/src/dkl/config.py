"""Flat key-value run configuration and run manifests.

A config document is plain text: one `key value` pair per line, blank
lines and `#` comments ignored. Every key is a TrainConfig field, every
value overridable from the command line, and the manifest written next to
a run's outputs is itself a valid config of the fully resolved values, so
re-running from a manifest reproduces the run.
"""
from __future__ import annotations

import datetime
from dataclasses import fields

from .trainers import TrainConfig

__all__ = ["ConfigError", "parse_kv_file", "build_config", "config_lines", "write_manifest"]


class ConfigError(Exception):
    """A config document or override could not be parsed or validated."""


_FIELD_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}


def parse_kv_file(path) -> dict[str, tuple[str, int]]:
    """Read `key value` lines; returns {key: (raw value, line number)}."""
    values: dict[str, tuple[str, int]] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key not in _FIELD_DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r} (first on line {values[key][1]})")
        values[key] = (rest.strip(), lineno)
    return values


def _coerce(key: str, text: str, where: str):
    default = _FIELD_DEFAULTS[key]
    kind = type(default)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true/false, got {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def build_config(mode: str, file_values: dict[str, tuple[str, int]] | None = None,
                 overrides: dict[str, str] | None = None, path: str = "<config>") -> TrainConfig:
    """Resolve defaults, then the config file, then command-line overrides."""
    resolved = {}
    for key, (text, lineno) in (file_values or {}).items():
        resolved[key] = _coerce(key, text, f"{path}:{lineno}")
    for key, text in (overrides or {}).items():
        if key not in _FIELD_DEFAULTS:
            raise ConfigError(f"unknown override {key!r}")
        resolved[key] = _coerce(key, text, f"--{key.replace('_', '-')}")
    if resolved.get("mode", mode) != mode:
        raise ConfigError(f"config is for mode {resolved['mode']!r}, command says {mode!r}")
    resolved["mode"] = mode
    try:
        return TrainConfig(**resolved)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_lines(cfg: TrainConfig) -> list[str]:
    return [f"{f.name} {_format(getattr(cfg, f.name))}" for f in fields(cfg)]


def write_manifest(path, cfg: TrainConfig, command: str, version: str) -> None:
    """Resolved configuration plus run metadata (metadata as comments, so
    the manifest re-parses as a config document)."""
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    lines = [
        "# dkl run manifest",
        f"# version {version}",
        f"# created {stamp}",
        f"# command {command}",
        *config_lines(cfg),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
