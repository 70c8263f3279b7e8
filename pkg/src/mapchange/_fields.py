"""key=value text encoding of flat dataclass configs."""

from __future__ import annotations

import dataclasses
from enum import Enum


def format_value(value) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(default, raw: str):
    """Parse ``raw`` into the type of ``default``."""
    raw = raw.strip()
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values, got {raw!r}")
        return tuple(type(d)(p) for d, p in zip(default, parts))
    if isinstance(default, str):  # includes str-valued enums
        return raw
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return int(raw)
    return type(default)(raw)


def to_items(obj) -> list[tuple[str, str]]:
    return [(f.name, format_value(getattr(obj, f.name))) for f in dataclasses.fields(obj)]


def from_items(cls, values: dict[str, str], **overrides):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, raw in values.items():
        try:
            kwargs[name] = parse_value(known[name].default, raw)
        except ValueError as exc:
            raise ValueError(f"{cls.__name__}.{name}: {exc}") from None
    kwargs.update(overrides)
    return cls(**kwargs)
