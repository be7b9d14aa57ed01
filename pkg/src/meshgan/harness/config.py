"""INI run configuration.

Sections map onto the option dataclasses: ``[gan]`` -> TrainConfig,
``[encoder]`` -> EncoderConfig, ``[inversion]`` -> InversionOptions,
``[dataset]``, ``[render]``, plus ``[viewpoints]`` (ranges in degrees)
and ``[camera]``.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict, Optional

from .. import camera as cam

VIEW_KEYS = ("pitch", "yaw", "roll")


class ConfigError(ValueError):
    pass


def read_config(path: Optional[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    return cp


def _floats(text: str):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _coerce(value: str, hint) -> Any:
    origin = typing.get_origin(hint)
    if hint is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if hint is int:
        return int(value)
    if hint is float:
        return float(value)
    if origin is tuple:
        return _floats(value)
    if hint is str:
        return value.strip()
    if origin is typing.Union:  # Optional[x]
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        if value.strip().lower() in ("", "none"):
            return None
        return _coerce(value, inner)
    raise ConfigError(f"unsupported option type {hint}")


def section_overrides(cp: configparser.ConfigParser, section: str, cls) -> Dict[str, Any]:
    """Typed values for the dataclass ``cls`` from one INI section."""
    if not cp.has_section(section):
        return {}
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in cp.items(section):
        if key not in names:
            raise ConfigError(f"unknown option [{section}] {key}")
        if key == "dist":
            continue
        try:
            out[key] = _coerce(raw, hints[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return out


def build(cp: configparser.ConfigParser, section: str, cls, **extra):
    return cls(**{**section_overrides(cp, section, cls), **extra})


def viewpoint_distribution(cp: configparser.ConfigParser,
                           default: cam.ViewpointDistribution = cam.CELEBA_GAN
                           ) -> cam.ViewpointDistribution:
    """``[viewpoints]`` with ``pitch = lo, hi`` style ranges in degrees."""
    if not cp.has_section("viewpoints"):
        return default
    sec = cp["viewpoints"]
    ranges = {}
    for key in VIEW_KEYS:
        lo_hi = getattr(default, key)
        if key in sec:
            vals = _floats(sec[key])
            lo_hi = (-abs(vals[0]), abs(vals[0])) if len(vals) == 1 else vals[:2]
        ranges[key] = tuple(lo_hi)
    order = sec.get("order", default.order).strip()
    extra = set(sec) - set(VIEW_KEYS) - {"order"}
    if extra:
        raise ConfigError(f"unknown option [viewpoints] {sorted(extra)[0]}")
    return cam.ViewpointDistribution(ranges["pitch"], ranges["yaw"], ranges["roll"], order)


def view_degrees(cp: configparser.ConfigParser, section: str = "render"):
    """(pitch, yaw, roll) in degrees from a section, defaulting to zeros."""
    if not cp.has_section(section):
        return (0.0, 0.0, 0.0)
    sec = cp[section]
    return tuple(float(sec.get(k, "0")) for k in VIEW_KEYS)
