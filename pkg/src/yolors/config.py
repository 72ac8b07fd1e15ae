"""Structured-text config: ``key = value`` lines grouped under ``[section]`` headers.

Sections only organise the file; keys are merged into one flat namespace
and must be unique. Values are coerced to the type of the matching
``ModelConfig`` field (or ``SyntheticSpec`` field for the ``[data]``
section). CLI flags are applied on top with :func:`merge`.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import SyntheticSpec
from .detector import ModelConfig


class ConfigError(ValueError):
    pass


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p.strip() for p in raw.replace(";", ",").split(",") if p.strip()]
            if like and isinstance(like[0], (int, float)):
                return tuple(type(like[0])(p) for p in parts)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<string>") -> dict:
    """Flat ``{section: {key: raw string}}`` mapping."""
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    return {s: dict(cp[s]) for s in cp.sections()}


def _defaults(cls) -> dict:
    obj = cls()
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(cls)}


def typed_values(sections: dict) -> tuple:
    """``(model_kwargs, data_kwargs)`` with values coerced to field types."""
    model_d, data_d = _defaults(ModelConfig), _defaults(SyntheticSpec)
    model, data = {}, {}
    for section, items in sections.items():
        for key, raw in items.items():
            if section == "data":
                if key not in data_d:
                    raise ConfigError(f"[data] unknown key {key!r}")
                data[key] = _coerce(raw, data_d[key], key)
                continue
            if key not in model_d:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            if key in model:
                raise ConfigError(f"key {key!r} set twice")
            model[key] = _coerce(raw, model_d[key], key)
    return model, data


def load_config(path) -> tuple:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return typed_values(parse_config(text, str(p)))


def merge(file_values: dict, overrides: dict) -> dict:
    """CLI overrides win; ``None`` means "flag not given"."""
    out = dict(file_values)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def format_config(cfg: ModelConfig) -> str:
    lines = ["[model]"]
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
