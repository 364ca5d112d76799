# ===========================================
# config.py
# ===========================================

## \file config.py
## \brief Loads environment-based configuration and flat key-value config files.
##
## \par Description
##     Central configuration module that reads environment variables via `dotenv`
##     and exposes the settings shared by collection, training, evaluation and
##     benchmarking:
##     - Data, checkpoint, report and log directories
##     - Global Parquet history path for benchmark runs
##     - Default seed and worker count
##
##     Flat `key=value` files (training, simulation, scenario and ingestion
##     configs) are parsed with `dotenv_values()` and coerced onto dataclass
##     field types by `load_kv_config()` / `apply_overrides()`.
##
## \par Usage
##     from scripts.config import DATA_DIR, DB_PATH, load_kv_config, ...
##
## \par Notes
##     - Loads from `.env` file in the project root (via `python-dotenv`)
##     - All paths are converted into `Path()` objects for consistency
##     - Counts are cast to `int` to prevent runtime casting bugs


from dataclasses import fields, is_dataclass, replace
from dotenv import load_dotenv, dotenv_values
from pathlib import Path
import types
import typing
import os

from model.errors import ConfigError


load_dotenv()

def env(key, default=None):
    """!Retrieve an environment variable with an optional default.

    @param key The environment variable key to read.
    @param default The fallback value to use if the variable is not set.

    @return The environment value as a string, or the default if not found.
    """
    return os.getenv(key, default)

DATA_DIR = Path(env("DATA_DIR", "data"))
CHECKPOINT_DIR = Path(env("CHECKPOINT_DIR", "checkpoints"))
REPORT_DIR = Path(env("REPORT_DIR", "reports"))
LOG_DIR = Path(env("LOG_DIR", "db/logs"))

DB_PATH = Path(env("DB_PATH", "db/bench.parquet"))

DEFAULT_SEED = int(env("DEFAULT_SEED", 7))
WORKERS = int(env("WORKERS", 1))


def _coerce(name: str, raw: str, annotation):
    """!Casts one raw string value onto a dataclass field annotation."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw.strip()
        if origin is tuple:
            item_type = args[0] if args else float
            return tuple(item_type(part) for part in raw.split(",") if part.strip())
        if origin in (typing.Union, types.UnionType) and type(None) in args:
            if raw.strip().lower() in ("", "none", "null"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(name, raw, inner)
    except ValueError as e:
        raise ConfigError(f"Config key '{name}': cannot parse '{raw}' as {annotation}") from e

    raise ConfigError(f"Config key '{name}': unsupported field type {annotation}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.init}


def load_kv_config(path, cls) -> dict:
    """!Parses a flat key-value file into typed keyword arguments for `cls`.

    @param path Path to the `key=value` file.
    @param cls Dataclass whose field names the keys must mirror.

    @return Dict of field name to typed value, only for keys present in the file.

    @throws FileNotFoundError If the file does not exist.
    @throws ConfigError On unknown keys or unparseable values.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")

    field_types = _field_types(cls)
    values = {}
    for key, raw in dotenv_values(path).items():
        if key not in field_types:
            raise ConfigError(f"Unknown key '{key}' in {path} for {cls.__name__}")
        if raw is None:
            continue
        values[key] = _coerce(key, raw, field_types[key])
    return values


def apply_overrides(instance, overrides: dict):
    """!Returns a copy of a config dataclass with non-None overrides applied.

    String values are coerced the same way file values are, so CLI flags and
    config-file keys share one parser.
    """
    if not is_dataclass(instance):
        raise TypeError(f"{type(instance).__name__} is not a dataclass")

    field_types = _field_types(type(instance))
    changes = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in field_types:
            raise ConfigError(f"Unknown key '{key}' for {type(instance).__name__}")
        changes[key] = _coerce(key, value, field_types[key]) if isinstance(value, str) else value
    return replace(instance, **changes)


def build_config(cls, path=None, overrides=None):
    """!Dataclass defaults < config file < explicit overrides."""
    base = cls(**load_kv_config(path, cls)) if path else cls()
    return apply_overrides(base, overrides or {})
