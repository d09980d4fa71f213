"""Key-value config files for model and training settings.

Format: one ``key = value`` pair per line; blank lines and ``#`` comments
ignored. Values are coerced by the target dataclass field type; tuples are
comma-separated ints (``stage_depths = 2,2,4,2,2``); booleans accept
true/false/yes/no/1/0; ``none`` clears optional fields.
"""

from __future__ import annotations

import dataclasses

from .hourglass import ModelConfig
from .training import TrainConfig


def parse_config_file(path) -> dict:
    pairs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            pairs[key.strip()] = value.strip()
    return pairs


def _coerce(value: str, ftype):
    text = str(ftype)
    if ftype is bool or "bool" in text:
        low = value.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if value.lower() == "none" and ("None" in text or "Optional" in text):
        return None
    if ftype is int or text in ("int", "int | None", "typing.Optional[int]"):
        return int(value)
    if ftype is float or "float" in text:
        return float(value)
    if ftype is tuple or "tuple" in text:
        return tuple(int(part) for part in value.split(","))
    return value


def _build(cls, pairs: dict, overrides: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in pairs.items():
        if key not in fields:
            continue  # a shared file may mix model and training keys
        kwargs[key] = _coerce(value, fields[key].type)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def model_config_from(pairs: dict, **overrides) -> ModelConfig:
    return _build(ModelConfig, pairs, overrides)


def train_config_from(pairs: dict, **overrides) -> TrainConfig:
    return _build(TrainConfig, pairs, overrides)


def unknown_keys(pairs: dict) -> set:
    """Keys that belong to neither config; callers may warn on these."""
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    known |= {f.name for f in dataclasses.fields(TrainConfig)}
    return set(pairs) - known
