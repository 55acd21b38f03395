"""JSON schemas of the run-configuration and model-grid files.

Structure is checked here; value semantics (ordering of bounds, definiteness
of weights) are enforced by the dataclasses that consume the documents.
"""
from __future__ import annotations

from jsonschema import Draft202012Validator

from .errors import ConfigurationError

_NUM = {"type": "number"}
_VEC2 = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_MAT2 = {"type": "array", "items": _VEC2, "minItems": 2, "maxItems": 2}
_INTERVAL = {"anyOf": [{"type": "null"},
                       {"type": "array", "items": {"type": ["number", "null"]},
                        "minItems": 2, "maxItems": 2}]}

REGION_SCHEMA = {
    "type": "object",
    "required": ["Q_e", "R_ext"],
    "properties": {"name": {"type": "string"}, "Q_e": _MAT2, "R_ext": _MAT2,
                   "speed": _INTERVAL, "fuel": _INTERVAL, "chi": _INTERVAL},
    "additionalProperties": False,
}

FB_SCHEMA = {
    "type": "object",
    "properties": {
        "N": {"type": "integer", "minimum": 2},
        "sample_period": {"type": "number", "exclusiveMinimum": 0},
        "regions": {"type": "array", "items": REGION_SCHEMA, "minItems": 1},
        "mu": {"type": "number", "exclusiveMinimum": 0},
        "x_min": _VEC2, "x_max": _VEC2, "u_min": _VEC2, "u_max": _VEC2,
        "penalty_source": {"enum": ["interpolated_grid", "online_dare"]},
        "tighten_constraints": {"type": "boolean"},
        "qp_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "qp_max_iterations": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

FF_SCHEMA = {
    "type": "object",
    "properties": {
        "N": {"type": "integer", "minimum": 2},
        "Q_ff": _MAT2, "R_ff": _MAT2,
        "x_min": _VEC2, "x_max": _VEC2, "u_min": _VEC2, "u_max": _VEC2,
        "qp_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "qp_max_iterations": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

SCENARIO_SCHEMA = {
    "type": "object",
    "oneOf": [
        {"required": ["kind"], "not": {"required": ["file"]}},
        {"required": ["file"], "not": {"required": ["kind"]}},
    ],
    "properties": {
        "kind": {"enum": ["fuel_step", "speed_ramp", "target_override", "synthetic_cycle"]},
        "params": {"type": "object"},
        "file": {"type": "string"},
        "label": {"type": "string"},
    },
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "required": ["scenario"],
    "properties": {
        "plant": {"type": "object"},
        "grid": {"type": "string"},
        "fb": FB_SCHEMA,
        "ff": FF_SCHEMA,
        "ff_mode": {"enum": ["none", "fb", "lut", "lookup_table", "mpc"]},
        "scenario": SCENARIO_SCHEMA,
        "seed": {"type": "integer", "minimum": 0},
        "sim": {
            "type": "object",
            "properties": {"egr_lag": {"type": "number", "minimum": 0},
                           "measurement_noise": {"type": "array", "items": {"type": "number", "minimum": 0},
                                                 "minItems": 2, "maxItems": 2}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

_MODEL_SCHEMA = {
    "type": "object",
    "required": ["A", "B", "Bf", "x_ss", "u_ss", "w_inj_ss"],
    "properties": {
        "A": _MAT2, "B": _MAT2,
        "Bf": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1,
                                          "maxItems": 1}, "minItems": 2, "maxItems": 2},
        "x_ss": _VEC2, "u_ss": _VEC2, "w_inj_ss": _NUM,
    },
}

GRID_SCHEMA = {
    "type": "object",
    "required": ["speed_breakpoints", "fuel_breakpoints", "nodes"],
    "properties": {
        "speed_breakpoints": {"type": "array", "items": _NUM, "minItems": 2},
        "fuel_breakpoints": {"type": "array", "items": _NUM, "minItems": 2},
        "nodes": {"type": "array", "items": _MODEL_SCHEMA, "minItems": 4},
        "terminal_penalties": {
            "type": "array",
            "items": {"type": "object", "required": ["Q_e", "R_ext", "P_tilde_upper"],
                      "properties": {"Q_e": _MAT2, "R_ext": _MAT2,
                                     "P_tilde_upper": {"type": "array",
                                                       "items": {"type": "array", "items": _NUM,
                                                                 "minItems": 10,
                                                                 "maxItems": 10}}}},
        },
    },
}


def _path(error) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def validate(document, schema, root=""):
    """Raise ``ConfigurationError`` naming the first offending field."""
    errors = sorted(Draft202012Validator(schema).iter_errors(document),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = _path(err)
        raise ConfigurationError(err.message, f"{root}.{path}" if root else path)
