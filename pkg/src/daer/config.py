"""Flat ``key = value`` config files mapped onto dataclasses.

Precedence is override > file > dataclass default. Lines starting with ``#``
are comments; tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar

from .errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(tp: Any, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union:
            inner = [a for a in args if a is not type(None)]
            if raw.lower() in ("none", "null", ""):
                return None
            return _coerce(inner[0], raw, key)
        if origin in (tuple, typing.Tuple):
            parts = [p.strip() for p in raw.strip("()[] ").split(",") if p.strip()]
            elem = args[0] if args else str
            return tuple(_coerce(elem, p, key) for p in parts)
        if tp is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if tp is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if tp is float:
            return float(raw)
        return raw
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def build(cls: Type[T], values: Mapping[str, Any]) -> T:
    """Instantiate dataclass `cls` from string (or typed) values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(cls: Type[T], path: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> T:
    values: Dict[str, Any] = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_kv_text(text, str(p)))
    values.update(overrides or {})
    return build(cls, values)


def to_dict(cfg) -> Dict[str, Any]:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def dump_config(cfg) -> str:
    return "".join(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}\n"
                   for k, v in to_dict(cfg).items())


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
