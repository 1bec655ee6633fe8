"""JSON schemas for run configs and emitted reports."""
from __future__ import annotations

import json
import os

DRAFT = "https://json-schema.org/draft/2020-12/schema"

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_complex = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_rect = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_resolution = {"oneOf": [_posint, {"type": "array", "items": _posint,
                                   "minItems": 2, "maxItems": 2}]}

DEFS = {
    "family": {
        "oneOf": [
            {"type": "object", "required": ["builtin"], "additionalProperties": False,
             "properties": {"builtin": {"enum": ["quadratic", "power", "cubic", "skew"]},
                            "d": {"type": "integer", "minimum": 2},
                            "coupling": {"type": "number"}}},
            {"type": "object", "required": ["path"], "additionalProperties": False,
             "properties": {"path": {"type": "string"}}},
            {"type": "object", "required": ["k", "d", "coeffs"],
             "properties": {"k": _posint, "d": {"type": "integer", "minimum": 2},
                            "coeffs": {"type": "array"}, "domain": {"type": "object"},
                            "name": {"type": "string"}}},
        ]
    },
    "ball": {
        "type": "object", "required": ["center", "radius"], "additionalProperties": False,
        "properties": {"center": {"oneOf": [_complex, {"const": "inf"}, {"type": "null"}]},
                       "radius": _pos},
    },
    "window": {
        "type": "object", "additionalProperties": False,
        "oneOf": [{"required": ["disc"]}, {"required": ["rect"]}],
        "properties": {
            "disc": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            "rect": _rect,
            "ball": {"$ref": "#/$defs/ball"},
        },
    },
}


def _config(name, props, required, extra=None):
    base = {"family": {"$ref": "#/$defs/family"}, "seed": _nonneg_int,
            "comment": {"type": "string"}}
    base.update(props)
    out = {
        "$schema": DRAFT, "$id": f"stability-lab/config/{name}.json",
        "title": f"{name} run config", "type": "object",
        "required": ["family"] + list(required), "additionalProperties": False,
        "properties": base, "$defs": DEFS,
    }
    if extra:
        out.update(extra)
    return out


_raster_props = {
    "rect": _rect, "resolution": _resolution,
    "estimator": {"enum": ["green", "approx", "birkhoff"]},
    "params": {"type": "object", "additionalProperties": False, "properties": {
        "depth": _posint, "n": _posint, "n_points": _posint, "n_iter": _posint}},
}
_birkhoff_needs_seed = {"if": {"properties": {"estimator": {"const": "birkhoff"}},
                               "required": ["estimator"]},
                        "then": {"required": ["seed"]}}

CONFIG = {
    "lyap": _config("lyap", _raster_props, ["rect", "resolution"], _birkhoff_needs_seed),
    "bif": _config("bif", dict(_raster_props, tau=_pos, radius_cells=_nonneg_int,
                               oracle_iter=_posint),
                   ["rect", "resolution"], _birkhoff_needs_seed),
    "mass": _config("mass", {
        "windows": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/window"}},
        "N_max": _posint, "n_base": _posint, "degree_fallback": {"type": "boolean"},
        "rate_tol": _pos,
    }, ["windows", "N_max"]),
    "ram": _config("ram", {
        "windows": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/window"}},
        "scan": {"type": "object", "required": ["rect", "resolution", "balls"],
                 "additionalProperties": False,
                 "properties": {"rect": _rect, "resolution": _resolution,
                                "balls": {"type": "array", "minItems": 1,
                                          "items": {"oneOf": [{"$ref": "#/$defs/ball"},
                                                              {"type": "null"}]}}}},
        "N_max": _posint, "n_base": _posint, "degree_fallback": {"type": "boolean"},
    }, ["N_max"], {"oneOf": [{"required": ["windows"]}, {"required": ["scan"]}]}),
    "web": _config("web", {
        "region": {"$ref": "#/$defs/window"}, "z0": _complex, "r": _pos, "eps": _pos,
        "tau": _pos, "n_max": _posint, "n_lines": _posint, "N_scan": _posint,
        "N_lines_max": _posint, "min_clearance": _pos, "p_max": _nonneg_int,
        "acrit_tol": _pos, "ks_points": _posint, "write_atoms": {"type": "boolean"},
    }, ["region", "seed"]),
    "misiu": _config("misiu", {
        "rect": _rect, "q": _posint, "p": _posint, "n_starts": _posint,
        "raster": {"type": "object", "additionalProperties": False,
                   "properties": {"rect": _rect, "resolution": _resolution}},
        "radius_cells": _nonneg_int, "tau": _pos,
    }, ["rect", "q", "p", "seed"]),
    "report": _config("report", {
        "rect": _rect, "resolution": _resolution, "N_max": _posint, "supersample": _posint,
        "n_base": _posint, "min_distance": _nonneg_int, "oracle_iter": _posint,
    }, ["rect", "resolution"]),
}

_meta = {
    "type": "object", "required": ["command", "config_sha256", "seed", "version"],
    "properties": {"command": {"type": "string"},
                   "config_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                   "seed": {"type": ["integer", "null"]}, "version": {"type": "string"}},
}


def _output(name, required, props=None):
    p = {"meta": _meta}
    p.update(props or {})
    return {"$schema": DRAFT, "$id": f"stability-lab/output/{name}.json",
            "title": f"{name} report", "type": "object",
            "required": ["meta"] + list(required), "properties": p}


_num_or_null = {"type": ["number", "null"]}
_series = {"type": "object", "required": ["window", "per_n", "partial_sums", "verdict"],
           "properties": {"verdict": {"enum": ["converged", "diverging", "inconclusive"]},
                          "per_n": {"type": "array", "items": _num_or_null}}}

OUTPUT = {
    "lyap": _output("lyap", ["grid", "estimator", "total_mass", "n_failed"]),
    "bif": _output("bif", ["grid", "tau", "n_active", "active_mass"]),
    "mass": _output("mass", ["fits"], {"fits": {"type": "array", "items": {
        "type": "object", "required": ["rate", "stable", "masses"]}}}),
    "ram": _output("ram", ["series"], {"series": {"type": "array", "items": _series}}),
    "web": _output("web", ["base", "levels", "lines", "marginal_ks", "acriticality"],
                   {"levels": {"type": "array", "items": {
                       "type": "object", "required": ["n", "fiber_size", "S_size"]}}}),
    "misiu": _output("misiu", ["hits", "search"], {"hits": {"type": "array", "items": {
        "type": "object",
        "required": ["lam", "q", "p", "residual", "transversality", "multiplier_modulus"]}}}),
    "report": _output("report", ["grid", "pairwise_agreement", "n_off_boundary"]),
}


def publish(directory):
    """Write every schema to ``directory/{config,output}/<command>.json``."""
    for kind, table in (("config", CONFIG), ("output", OUTPUT)):
        os.makedirs(os.path.join(directory, kind), exist_ok=True)
        for name, schema in table.items():
            with open(os.path.join(directory, kind, f"{name}.json"), "w") as fh:
                json.dump(schema, fh, indent=2, sort_keys=True)
                fh.write("\n")
