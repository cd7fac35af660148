"""Flat ``key = value`` configuration shared by config files and CLI flags.

Every key is also a CLI flag (``r_cross`` -> ``--r-cross``); flags override
the file, which overrides the defaults below.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import DataError
from .head import PostprocessConfig
from .model import ModelConfig
from .synthetic import SequenceSpec

# run-level settings that are not part of the model or the postprocess
RUN_DEFAULTS: dict[str, object] = {
    "steps": 1500,
    "pairs": 20,
    "lr": 1e-3,
    "reps": 30,
    "warmup": 3,
}

MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
POST_DEFAULTS = {f.name: f.default for f in dataclasses.fields(PostprocessConfig)}
DEFAULTS: dict[str, object] = {**MODEL_DEFAULTS, **POST_DEFAULTS, **RUN_DEFAULTS}


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise DataError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_pairs(text: str, defaults: dict, source: str = "config") -> dict:
    """Parse ``key = value`` lines (``#`` comments, blanks ignored) against ``defaults``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise DataError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_pairs(text, DEFAULTS, str(path))


class Settings:
    """Resolved values: defaults < file < overrides."""

    def __init__(self, file_values: dict | None = None, overrides: dict | None = None):
        self.values = dict(DEFAULTS)
        self.values.update(file_values or {})
        for k, v in (overrides or {}).items():
            if v is not None:
                self.values[k] = _coerce(k, v, DEFAULTS[k])

    def __getitem__(self, key: str):
        return self.values[key]

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**{k: self.values[k] for k in MODEL_DEFAULTS})
        except ValueError as exc:
            raise DataError(f"invalid model config: {exc}") from exc

    def post_config(self) -> PostprocessConfig:
        try:
            return PostprocessConfig(**{k: self.values[k] for k in POST_DEFAULTS})
        except ValueError as exc:
            raise DataError(f"invalid postprocess config: {exc}") from exc


SEQUENCE_DEFAULTS = {f.name: f.default for f in dataclasses.fields(SequenceSpec)}


def parse_sequence_spec(text: str) -> SequenceSpec:
    """``easy`` or comma/newline separated ``key=value`` SequenceSpec fields."""
    text = text.strip()
    if text == "easy":
        from .synthetic import easy_spec

        return easy_spec()
    values = parse_pairs(text.replace(",", "\n") if "\n" not in text else text, SEQUENCE_DEFAULTS, "sequence spec")
    values.setdefault("texture_seed", values.get("seed", 0))
    try:
        return SequenceSpec(**values)
    except ValueError as exc:
        raise DataError(f"invalid sequence spec: {exc}") from exc
