"""
Run configuration: flat ``key = value`` files with dotted keys, e.g.::

    # comment
    graph.window_size = 5
    pretrain.alpha = 0.5
    report.class_counts = 4, 8, 12

Every key maps onto a field of the dataclasses in ``data_object_model.run_state``; the field
defaults are the configuration defaults. Unknown keys and unparsable values raise ConfigError.
"""
from __future__ import annotations

import dataclasses
import logging
import typing
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from data_object_model.errors import ConfigError, MissingInputError
from data_object_model.run_state import RunConfig

logger = logging.getLogger(__name__)

SECTIONS = ("graph", "encoder", "pretrain", "fewshot", "synth", "report")
TOP_LEVEL = ("log_level",)


def _field_types() -> Dict[str, Tuple[Optional[str], str, Any]]:
    """key -> (section or None, field name, annotated type)."""
    out: Dict[str, Tuple[Optional[str], str, Any]] = {}
    hints = typing.get_type_hints(RunConfig)
    for section in SECTIONS:
        section_cls = hints[section]
        for name, annotation in typing.get_type_hints(section_cls).items():
            out[f"{section}.{name}"] = (section, name, annotation)
    for name in TOP_LEVEL:
        out[name] = (None, name, hints[name])
    return out


KNOWN_KEYS = _field_types()


def _coerce(key: str, raw: str, annotation) -> Any:
    text = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is typing.Union and type(None) in args:
            if text.lower() in ("", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(key, text, inner)
        if origin in (list, List):
            item = args[0] if args else str
            return [_coerce(key, part, item) for part in text.split(",") if part.strip()]
        if annotation is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(annotation, '__name__', annotation)}")


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Raw key -> value strings; later assignments of a key win."""
    values: Dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{line_no}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def build_config(raw: Mapping[str, str], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Apply raw file values, then already-typed overrides (CLI flags), on top of the defaults."""
    cfg = RunConfig()
    merged: Dict[str, Any] = {}
    for key, value in raw.items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value, KNOWN_KEYS[key][2])
    for key, value in (overrides or {}).items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            merged[key] = value

    for key, value in merged.items():
        section, name, _ = KNOWN_KEYS[key]
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, name, value)
    return cfg.validate()


def load_config(path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    raw: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(path, "config file")
        raw = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        logger.debug("loaded %d keys from %s", len(raw), path)
    return build_config(raw, overrides)


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def config_items(cfg: RunConfig) -> List[Tuple[str, Any]]:
    """Every key with its resolved value, in a fixed order."""
    items = []
    for section in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, section)):
            items.append((f"{section}.{f.name}", getattr(getattr(cfg, section), f.name)))
    for name in TOP_LEVEL:
        items.append((name, getattr(cfg, name)))
    return items


def render_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_render(value)}\n" for key, value in config_items(cfg))


def config_echo(cfg: RunConfig) -> Dict[str, Any]:
    return {key: value for key, value in config_items(cfg)}
