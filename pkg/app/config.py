"""
Run configuration files.

Format: UTF-8 text, one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored and later keys override earlier ones. Nested settings use a
dotted prefix (``action_lam.train_steps = 500``). Lists are comma-separated.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin

from pydantic import BaseModel, ValidationError

from app.models.schemas import RunConfig

logger = logging.getLogger(__name__)

DATABASE_ENV = "LATENT_BENCH_DB"
DEFAULT_DATABASE_URL = "sqlite:///./latent_bench.db"
SECTIONS = ("env", "action_lam", "image_lam", "backbone")
SHARED_KEYS = {"horizon": "action_lam.horizon", "tokens_per_step": "image_lam.tokens_per_step"}
REFERENCED_FILES = ("dataset", "action_lam_checkpoint", "image_lam_checkpoint")


class ConfigError(ValueError):
    """Raised for unreadable, unknown or invalid configuration entries."""


def database_url() -> str:
    return os.environ.get(DATABASE_ENV, DEFAULT_DATABASE_URL)


def _is_list_field(model: type, name: str) -> bool:
    field = model.model_fields.get(name)
    if field is None:
        return False
    annotation = field.annotation
    if get_origin(annotation) is Union:
        annotation = next((a for a in get_args(annotation) if a is not type(None)), annotation)
    return get_origin(annotation) is list


def _allows_none(model: type, name: str) -> bool:
    annotation = model.model_fields[name].annotation
    return get_origin(annotation) is Union and type(None) in get_args(annotation)


def _coerce(raw: str) -> Any:
    value = raw.strip()
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def parse_config_text(text: str) -> Dict[str, str]:
    """Raw ``key -> value`` pairs; later lines win."""
    entries: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"line {number}: expected 'key = value', got '{content}'")
        key, value = (part.strip() for part in content.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}: missing key")
        entries[key] = value
    return entries


def build_config(entries: Dict[str, str]) -> RunConfig:
    """Turn raw entries into a validated RunConfig."""
    top: Dict[str, Any] = {}
    nested: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}
    for key, raw in entries.items():
        section, _, name = key.rpartition(".")
        model = RunConfig.model_fields[section].annotation if section in SECTIONS else RunConfig
        if section and section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}' in key '{key}'")
        if name not in model.model_fields or name in SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
        if _is_list_field(model, name):
            value: Any = [_coerce(item) for item in raw.split(",") if item.strip()]
        else:
            value = _coerce(raw)
            if value is None and not _allows_none(model, name):
                value = raw.strip()
        (nested[section] if section else top)[name] = value
    for key, target in SHARED_KEYS.items():
        section, name = target.split(".")
        if key in top and name not in nested[section]:
            nested[section][name] = top[key]
    for section, values in nested.items():
        if values:
            top[section] = values
    try:
        return RunConfig(**top)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a config file and apply CLI overrides.

    Args:
        path: config file; None uses the defaults
        overrides: ``key -> value`` applied after the file (None values are skipped)

    Returns:
        Validated RunConfig
    """
    entries: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            entries = parse_config_text(path.read_text(encoding="utf-8"))
        except UnicodeDecodeError as e:
            raise ConfigError(f"config file {path} is not UTF-8: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            entries[key] = ",".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
    config = build_config(entries)
    for key in REFERENCED_FILES:
        value = getattr(config, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{key} refers to a missing file: {value}")
    logger.debug(f"Loaded config with {len(entries)} explicit entries")
    return config


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON dump (sorted keys)."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def short_hash(config: BaseModel) -> str:
    return config_hash(config)[:16]


def dump_config(config: RunConfig) -> str:
    """Serialize back to the key = value format."""
    lines = []
    data = config.model_dump(mode="json")
    for key, value in data.items():
        if key in SECTIONS:
            continue
        lines.append(f"{key} = {_render(value)}")
    for section in SECTIONS:
        for key, value in data[section].items():
            lines.append(f"{section}.{key} = {_render(value)}")
    return "\n".join(lines) + "\n"


def write_config_echo(out_dir: Union[str, Path], config: RunConfig) -> Path:
    """Write the resolved config next to the run outputs as ``config.conf``."""
    path = Path(out_dir) / "config.conf"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    logger.debug(f"Config echo written to {path}")
    return path


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)
