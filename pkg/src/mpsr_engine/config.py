from __future__ import annotations
import dataclasses
import os
import types
from pathlib import Path
from typing import Any, Literal, Mapping, Union, get_args, get_origin, get_type_hints

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

# Load .env if present
load_dotenv()

# Where commands write their artifacts when --out is not given
OUT_DIR = os.getenv("MPSR_OUT_DIR", "./runs")

# torch device for training/inference ("cpu", "cuda", "cuda:1", ...)
DEVICE = os.getenv("MPSR_DEVICE", "cpu")

# Optional cap on intra-op threads (unset = torch default)
NUM_THREADS = int(os.getenv("MPSR_NUM_THREADS", "0")) or None

# "off" | "console" | "otlp"
TRACE_EXPORTER = os.getenv("MPSR_TRACE", "off").lower()


def read_config_file(path: str | Path) -> dict[str, str]:
    """
    Read a KEY=VALUE config file (dotenv syntax, comments allowed).
    Keys are returned lower-cased so they line up with dataclass field names.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"No such config file: {p}")
    values = dotenv_values(p)
    return {k.strip().lower(): (v or "").strip() for k, v in values.items()}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_value(raw: str, hint: Any) -> Any:
    """Parse one config string into the python type described by `hint`."""
    origin = get_origin(hint)
    args = get_args(hint)

    if hint is bool:
        return _parse_bool(raw)
    if hint in (int, float, str):
        return hint(raw.strip())
    if origin is Literal:
        val = raw.strip()
        if val not in args:
            raise ValueError(f"{val!r} not one of {list(args)}")
        return val
    if origin in (Union, types.UnionType):
        if raw.strip().lower() in ("", "none", "null") and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return parse_value(raw, inner[0])
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            items = [s for s in raw.split(",") if s.strip()]
            return tuple(parse_value(s, args[0]) for s in items)
        parts = raw.split(":")
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} ':'-separated parts, got {raw!r}")
        return tuple(parse_value(p, a) for p, a in zip(parts, args))
    raise ValueError(f"unsupported config type {hint!r}")


def apply_mapping(obj: Any, values: Mapping[str, str], *, strict: bool = True) -> tuple[Any, dict[str, str]]:
    """
    Return a copy of dataclass `obj` with fields overridden from `values`.
    Unused keys are returned; with strict=True they raise ConfigError instead.
    """
    hints = get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates: dict[str, Any] = {}
    leftover: dict[str, str] = {}
    for key, raw in values.items():
        if key not in names:
            leftover[key] = raw
            continue
        try:
            updates[key] = parse_value(raw, hints[key])
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key.upper()}={raw!r}: {e}") from e
    if strict and leftover:
        raise ConfigError(f"unknown config key: {sorted(leftover)[0].upper()}")
    return dataclasses.replace(obj, **updates), leftover
