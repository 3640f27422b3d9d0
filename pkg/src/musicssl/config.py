"""Run configuration: one JSON document drives every pipeline stage.

The schema is closed: unknown keys are rejected with the full key path, and
values are type-checked against the defaults tree. The hash of the fully
merged document stamps every artifact so mismatched pipeline stages can be
detected at evaluation time.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import SchemaError
from .hashing import config_hash

DEFAULTS = {
    "seed": 0,
    "synth": {
        "task": "pitch",
        "n_clips": 200,
        "duration": None,  # None -> per-task default
        "sample_rate": 16000,
    },
    "dsp": {
        "feature_kind": "mfcc",
        "mfcc": {
            "n_mels": 40,
            "n_coeffs": 13,
            "fft_size": 1024,
            "hop": 320,
            "include_deltas": True,
            "delta_width": 5,
            "pad_tail": True,
        },
    },
    "quantize": {
        "k": 500,
        "max_iter": 100,
        "tol": 1e-7,
        "frame_budget": 2000000,
        "iter2_layer": None,  # None -> middle transformer layer
    },
    "encoder": {
        "conv_layers": [[64, 10, 5], [64, 3, 2], [64, 3, 2], [64, 3, 2],
                        [64, 3, 2], [64, 2, 2], [64, 2, 2]],
        "n_transformer_layers": 2,
        "hidden": 64,
        "heads": 4,
        "ff_dim": 256,
        "dropout": 0.1,
        "max_frames": 2048,
        "sample_rate": 16000,
        "frame_rate": 50,
    },
    "pretrain": {
        "paradigm": "discrete",
        "steps": 2000,
        "crop_seconds": 30.0,
        "token_budget": 480000,
        "lr": 0.0005,
        "warmup_frac": 0.08,
        "weight_decay": 0.01,
        "mask_span": 10,
        "mask_prob": 0.65,
        "masked_only": True,
        "loss_kind": "mse",
        "smooth_l1_beta": 1.0,
        "target_layers": "all",  # 'all' or an integer top-k count
        "normalize_targets": True,
        "tau_start": 0.999,
        "tau_end": 0.9999,
        "tau_anneal_frac": 0.3,
        "checkpoint_every": 500,
        "iterations": 1,
        "proj_dim": 1024,
        "temperature": 0.1,
    },
    "probe": {
        "hidden": 512,
        "lr": 0.001,
        "epochs": 50,
        "batch_size": 32,
        "patience": 10,
        "window_seconds": 5.0,
        "hop_seconds": 5.0,
        "n_tags": 8,
    },
    "metrics": {
        "beat_tolerance": 0.02,
        "key_bidirectional_fifth": False,
        "dbn": {
            "fps": 50.0,
            "min_bpm": 55.0,
            "max_bpm": 215.0,
            "transition_lambda": 100.0,
            "observation_lambda": 0.0625,
            "threshold": 0.0,
        },
    },
}

# keys whose defaults are None accept this type instead
_NULLABLE_TYPES = {
    "synth.duration": (int, float),
    "quantize.iter2_layer": int,
    "pretrain.target_layers": (int, str),
}


def _type_name(value) -> str:
    return type(value).__name__


def _check(value, default, path: str):
    if default is None:
        allowed = _NULLABLE_TYPES.get(path)
        if value is None:
            return None
        if allowed is None or not isinstance(value, allowed):
            raise SchemaError(f"{path}: expected null, got {_type_name(value)}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"{path}: expected bool, got {_type_name(value)}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if path in _NULLABLE_TYPES and value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{path}: expected number, got {_type_name(value)}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"{path}: expected number, got {_type_name(value)}")
        return float(value)
    if isinstance(default, str):
        if path == "pretrain.target_layers" and isinstance(value, int):
            return value
        if not isinstance(value, str):
            raise SchemaError(f"{path}: expected string, got {_type_name(value)}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise SchemaError(f"{path}: expected list, got {_type_name(value)}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise SchemaError(f"{path}: expected object, got {_type_name(value)}")
        merged = {}
        for key, sub_default in default.items():
            sub_path = f"{path}.{key}" if path else key
            if key in value:
                merged[key] = _check(value[key], sub_default, sub_path)
            else:
                merged[key] = copy.deepcopy(sub_default)
        for key in value:
            if key not in default:
                sub_path = f"{path}.{key}" if path else key
                raise SchemaError(f"unknown config key: {sub_path}")
        return merged
    raise SchemaError(f"{path}: unhandled schema node")


def validate_config(document: dict) -> dict:
    """Merge a partial config over the defaults, rejecting unknown keys."""
    return _check(document, DEFAULTS, "")


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Load and validate a config file; None means pure defaults.

    overrides (e.g. from CLI flags) are applied after the file and validated
    with it. The result carries its own hash under '_hash'.
    """
    document = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise SchemaError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(document, dict):
            raise SchemaError(f"{path}: config root must be an object")
    merged = validate_config(document)
    if overrides:
        merged = _apply_overrides(merged, overrides)
    merged["_hash"] = config_hash(merged)
    return merged


def _apply_overrides(config: dict, overrides: dict) -> dict:
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return validate_config(config)
