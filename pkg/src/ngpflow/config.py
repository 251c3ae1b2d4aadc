"""Experiment configuration: JSON document validated against a schema."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

_NUM = {"type": "number"}
_NUM_OR_LIST = {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]}
_ACTIVATION = {
    "oneOf": [
        {"type": "string"},
        {"type": "object", "additionalProperties": False, "minProperties": 1, "maxProperties": 1,
         "properties": {
             "monomial": {"type": "integer", "minimum": 1},
             "polynomial": {"type": "array", "items": _NUM, "minItems": 1},
             "numeric": {"type": "string"},
         }},
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["network", "dataset"],
    "properties": {
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["activation"],
            "properties": {
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "bias_var": _NUM_OR_LIST,
                "weight_var": _NUM_OR_LIST,
                "activation": _ACTIVATION,
                "shape": {"enum": ["deep", "shallow"]},
                "width_sweep": {"type": "array", "minItems": 1,
                                "items": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]}},
                "n_out": {"type": "integer", "minimum": 1},
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["mnist", "synthetic", "inline"]},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "count": {"type": "integer", "minimum": 1},
                "index": {"type": "integer", "minimum": 0},
                "train_count": {"type": "integer", "minimum": 0},
                "test_count": {"type": "integer", "minimum": 0},
                "input_dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "inputs": {"type": "array", "minItems": 1,
                           "items": {"type": "array", "minItems": 1, "items": _NUM}},
                "targets": {"type": "array", "items": {"type": "array", "items": _NUM}},
                "labels_inline": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": ["wick", "quad"]},
                "order": {"type": "integer", "minimum": 2},
                "jitter": {"type": "number", "minimum": 0},
                "mc_samples": {"type": "integer", "minimum": 100},
                "mc_method": {"enum": ["gram", "weights"]},
                "mc_seed": {"type": "integer", "minimum": 0},
                "bins": {"type": "integer", "minimum": 10},
                "half_width_sd": {"type": "number", "exclusiveMinimum": 0},
                "channel": {"type": "integer", "minimum": 0},
                "dump_samples": {"type": "boolean"},
                "grid": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"points": {"type": "integer", "minimum": 3},
                                   "half_width_sd": {"type": "number", "exclusiveMinimum": 0}},
                },
                "mode": {"enum": ["exp", "lin", "both"]},
                "epsilon": {"type": "number", "minimum": 0},
                "epsilon_sweep": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "train_counts": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "test_count": {"type": "integer", "minimum": 1},
                "seeds": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"directory": {"type": "string"}},
        },
    },
}


class ConfigError(ValueError):
    pass


class ExperimentConfig(dict):
    """Validated configuration; ``base_dir`` anchors relative paths."""

    def __init__(self, data: dict, base_dir: Path | str = "."):
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        super().__init__(copy.deepcopy(data))
        self.base_dir = Path(base_dir)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls(data, path.parent)

    def section(self, name: str) -> dict:
        return self.get(name, {})

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q
