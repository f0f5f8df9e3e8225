"""Dotted-key runtime configuration for the CLI.

Precedence is defaults < config file < command-line overrides. Keys
mirror the library modules; unknown keys are rejected rather than
silently ignored.
"""

from __future__ import annotations

import json
from pathlib import Path

import yaml

from .errors import ConfigInvalid

DEFAULTS = {
    "dbscan.eps": 1.5,
    "dbscan.min_pts": 10,
    "dbscan.time_scale": 5.0,
    "mass.min": 0.5,
    "mass.max": 5.5,
    "speed.window": 21,
    "speed.vmax": 5.0,
    "breaks.idle_fraction": 0.8,
    "breaks.min_break_s": 600.0,
    "trays.full_kg": 4.0,
    "trays.empty_kg": 1.0,
    "trays.sustain_s": 3.0,
    "trays.median_window": 11,
    "model.seq_len": 768,
    "train.epochs": 50,
    "train.batch_size": 270,
    "train.learning_rate": 1e-3,
    "train.val_fraction": 0.2,
    "train.class_weighting": "none",
    "classify.overlap": False,
    "synth.days": 1,
    "synth.n_carts": 2,
    "synth.day_length_s": 2400.0,
    "synth.breaks": "1100:620",  # start:duration pairs, comma separated; "none" for no breaks
    "synth.start_date": "4-10-24",
}


def parse_breaks(spec: str) -> tuple:
    """Parse "start:duration,start:duration" break schedules."""
    spec = spec.strip().lower()
    if spec in ("", "none"):
        return ()
    breaks = []
    for part in spec.split(","):
        try:
            start, duration = (float(v) for v in part.split(":"))
        except ValueError:
            raise ConfigInvalid(f"bad break spec {part!r}; expected start:duration") from None
        breaks.append((start, duration))
    return tuple(breaks)


def load_config_file(path) -> dict:
    """Read a YAML or JSON config file into flat dotted keys."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: config file must contain a mapping")
    return _flatten(data)


def _flatten(data, prefix="") -> dict:
    flat = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigInvalid(f"override {pair!r} must look like key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(file_path=None, overrides=None) -> dict:
    """Effective configuration after applying precedence and coercion."""
    cfg = dict(DEFAULTS)
    for source in (load_config_file(file_path) if file_path else {}, parse_overrides(overrides)):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigInvalid(
                    f"unknown configuration key {key!r}; known keys: {', '.join(sorted(DEFAULTS))}"
                )
            cfg[key] = _coerce(key, value, type(DEFAULTS[key]))
    return cfg


def _coerce(key, value, target):
    if isinstance(value, target) and not (target is int and isinstance(value, bool)):
        return value
    try:
        if target is bool:
            if isinstance(value, str):
                lowered = value.lower()
                if lowered in ("true", "on", "yes", "1"):
                    return True
                if lowered in ("false", "off", "no", "0"):
                    return False
            raise ValueError(f"not a boolean: {value!r}")
        if target is int:
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError(f"not an integer: {value!r}")
            return int(as_float)
        return target(value)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(f"bad value for {key}: {e}") from None
