"""Flat ``section.key = value`` config files mapped onto dataclasses.

Every key must name a field of a known section; anything else is an error.
Tuples are written comma-separated.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str, typ, key: str):
    text = text.strip()
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _parse_value(text: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin in (tuple, list):
        (inner, *_) = typing.get_args(typ)
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        vals = [_parse_scalar(p, inner, key) for p in parts]
        return tuple(vals) if origin is tuple else vals
    return _parse_scalar(text, typ, key)


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build(sections: dict[str, type], values: dict[str, str]) -> dict[str, typing.Any]:
    """Instantiate one dataclass per section from flat ``section.key`` values."""
    kwargs: dict[str, dict] = {name: {} for name in sections}
    for key, text in values.items():
        section, _, field = key.partition(".")
        if section not in sections:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(sections[section])
        names = {f.name for f in dataclasses.fields(sections[section])}
        if field not in names:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[section][field] = _parse_value(text, hints[field], key)
    out = {}
    for name, cls in sections.items():
        try:
            out[name] = cls(**kwargs[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return out


def dump_section(name: str, obj) -> str:
    return "".join(f"{name}.{f.name} = {_format_value(getattr(obj, f.name))}\n"
                   for f in dataclasses.fields(obj))


def load_file(path: str | Path, sections: dict[str, type]) -> dict[str, typing.Any]:
    p = Path(path)
    return build(sections, parse_text(p.read_text(encoding="utf-8"), str(p)))
