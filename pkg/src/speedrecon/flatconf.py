"""Flat ``key = value`` text format shared by scenario and parameter files.

One assignment per line; ``#`` starts a comment; keys are dotted paths
(``primitive.0.kind``); arrays are comma-separated. Values are kept as
strings until a caller asks for a type, so files round-trip exactly.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

from .errors import ValidationError


def parse(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValidationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(path) -> dict[str, str]:
    path = Path(path)
    return parse(path.read_text(encoding="utf-8"), str(path))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def dumps(entries: Mapping[str, Any], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {_fmt(v)}" for k, v in entries.items()]
    return "\n".join(lines) + "\n"


def dump(path, entries: Mapping[str, Any], header: str | None = None):
    Path(path).write_text(dumps(entries, header), encoding="utf-8")


def get_float(conf: Mapping[str, str], key: str, default: float | None = None) -> float:
    if key not in conf:
        if default is None:
            raise ValidationError(f"missing key {key!r}")
        return default
    try:
        return float(conf[key])
    except ValueError:
        raise ValidationError(f"{key}: not a number: {conf[key]!r}") from None


def get_int(conf: Mapping[str, str], key: str, default: int | None = None) -> int:
    value = get_float(conf, key, None if default is None else float(default))
    if value != int(value):
        raise ValidationError(f"{key}: expected an integer, got {value}")
    return int(value)


def get_floats(conf: Mapping[str, str], key: str) -> list[float]:
    return [float(s) for s in conf[key].split(",") if s.strip()]


def subtree(conf: Mapping[str, str], prefix: str) -> dict[str, str]:
    """Entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in conf.items() if k.startswith(p)}
