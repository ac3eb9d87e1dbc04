"""Layered ``key = value`` configuration files.

Later layers override earlier ones; ``--set key=value`` overrides are the
last layer. Values are parsed as bool, int, float, comma list or string.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .core import ConfigError


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    return str(value)


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_lines(text.splitlines(), str(path))


def parse_overrides(pairs) -> dict:
    return parse_lines(pairs or [], "--set")


def layered(*layers: dict) -> dict:
    merged = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items()})
    return merged


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(cfg.items()))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]
