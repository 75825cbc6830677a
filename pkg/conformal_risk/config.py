# config.py - JSON configuration loading

"""
Configuration files are JSON objects with optional sections

    {
      "task":  {...},   # SegTaskConfig / StorageTaskConfig / ConfTrTaskConfig fields
      "train": {...},   # TrainConfig fields
      "sweep": {...}    # sweep grid and Monte Carlo settings
    }

Missing sections and keys fall back to each dataclass' defaults.
"""

import dataclasses
import json
import os

from dotenv import load_dotenv

from .exceptions import ConfigError

load_dotenv()

SECTIONS = ('task', 'train', 'sweep')


def load_config(path):
    """
    Load a JSON config file

    Args:
        path (str): Path to the JSON file

    Returns:
        dict: {'task': {...}, 'train': {...}, 'sweep': {...}}
    """
    if path is None:
        return {section: {} for section in SECTIONS}

    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file '{path}' not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file '{path}' is not valid JSON: {e}")

    if not isinstance(raw, dict):
        raise ConfigError("Config file must contain a JSON object")

    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {unknown}")

    return {section: dict(raw.get(section) or {}) for section in SECTIONS}


def dataclass_from_dict(cls, values):
    """
    Build a config dataclass, rejecting unknown keys

    Args:
        cls (type): Dataclass type with a validate() method
        values (dict): Field overrides

    Returns:
        object: Validated config instance
    """
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} fields: {unknown}")

    for f in dataclasses.fields(cls):
        # JSON has no tuples
        if f.name in values and isinstance(values[f.name], list) and 'tuple' in str(f.type):
            values[f.name] = tuple(values[f.name])

    instance = cls(**values)
    errors = instance.validate()
    if errors:
        raise ConfigError(errors)
    return instance


def thread_count():
    """Worker threads for Monte Carlo trials, from CONFORMAL_RISK_THREADS"""
    raw = os.getenv('CONFORMAL_RISK_THREADS', '1')
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"CONFORMAL_RISK_THREADS must be an integer (got {raw!r})")
    return max(1, count)
