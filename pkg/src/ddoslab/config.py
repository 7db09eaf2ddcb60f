"""Pipeline configuration: JSON file, published JSON schema, defaults, seed override."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

SEED_ENV = "ANOMALY_FLOW_SEED"

DEFAULTS: dict = {
    "seed": 0,
    "ranges": None,
    "external": {},
    "preprocess": {"iqr_k": 3.0, "external_test_fraction": 0.3},
    "ganomaly": {
        "latent_dim": 32,
        "hidden": [1024, 512, 256],
        "lr": 1e-4,
        "beta1": 0.5,
        "batch_size": 256,
        "w_adv": 1.0,
        "w_con": 50.0,
        "w_enc": 1.0,
        "local_epochs": 50,
    },
    "federation": {"rounds": 10, "local_epochs": 50, "weighting": "samples",
                   "min_quorum": 1, "round_timeout": 600.0},
    "evaluation": {"q": 0.95},
    "generate": {"n": 100000},
    "external_models": {
        "kinds": ["mlp_classifier", "isolation_forest"],
        "pretrain": {"n_trees": 100, "subsample": 256, "hidden": [64, 32], "epochs": 30,
                     "batch_size": 256, "lr": 1e-3, "q": 0.95, "max_violation_ratio": 0.10},
        "finetune": {"epochs": 30, "batch_size": 256, "lr": 1e-3, "trees_per_batch": 10,
                     "q": 0.95},
    },
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ddoslab pipeline configuration",
    "type": "object",
    "required": ["schema", "silos"],
    "properties": {
        "seed": {"type": "integer"},
        "schema": {"type": "string", "description": "path to the FlowSchema JSON"},
        "ranges": {"type": ["string", "null"], "description": "semantic range rules for audits"},
        "silos": {"type": "object", "minProperties": 1,
                  "additionalProperties": {"type": "string"},
                  "description": "federation participant id -> raw CSV path"},
        "external": {"type": "object", "maxProperties": 1,
                     "additionalProperties": {"type": "string"},
                     "description": "external party id -> raw labeled CSV path"},
        "preprocess": {"type": "object", "properties": {
            "iqr_k": {"type": "number", "exclusiveMinimum": 0},
            "external_test_fraction": {"type": "number", "exclusiveMinimum": 0,
                                       "exclusiveMaximum": 1}}},
        "ganomaly": {"type": "object", "properties": {
            "latent_dim": _pos_int, "hidden": {"type": "array", "items": _pos_int, "minItems": 1},
            "lr": {"type": "number", "exclusiveMinimum": 0}, "beta1": _num,
            "batch_size": _pos_int, "w_adv": {"type": "number", "minimum": 0},
            "w_con": {"type": "number", "minimum": 0}, "w_enc": {"type": "number", "minimum": 0},
            "local_epochs": _pos_int}},
        "federation": {"type": "object", "properties": {
            "rounds": _pos_int, "local_epochs": _pos_int,
            "weighting": {"enum": ["samples", "uniform"]},
            "min_quorum": _pos_int, "round_timeout": {"type": "number", "exclusiveMinimum": 0}}},
        "evaluation": {"type": "object", "properties": {
            "q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}},
        "generate": {"type": "object", "properties": {"n": _pos_int}},
        "external_models": {"type": "object", "properties": {
            "kinds": {"type": "array", "items": {"enum": ["mlp_classifier", "isolation_forest"]}},
            "pretrain": {"type": "object"}, "finetune": {"type": "object"}}},
    },
    "patternProperties": {"^_": {}},
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(cfg: dict, base_dir: Path) -> dict:
    """Make every data path absolute relative to the config file's directory."""
    def fix(p):
        if p is None:
            return None
        p = Path(p)
        return str(p if p.is_absolute() else (base_dir / p).resolve())

    cfg["schema"] = fix(cfg["schema"])
    cfg["ranges"] = fix(cfg.get("ranges"))
    cfg["silos"] = {k: fix(v) for k, v in cfg["silos"].items()}
    cfg["external"] = {k: fix(v) for k, v in cfg.get("external", {}).items()}
    return cfg


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def load_config(path: str | Path, seed: int | None = None) -> dict:
    """Read, validate and complete a config. Seed precedence: argument, env var, file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    validate(raw)
    cfg = resolve(_merge(DEFAULTS, raw), path.parent.resolve())
    if seed is not None:
        cfg["seed"] = int(seed)
    elif os.environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    overlap = set(cfg["silos"]) & set(cfg["external"])
    if overlap:
        raise ConfigError(f"ids used both as silo and external party: {sorted(overlap)}")
    return cfg


def toy_config(data_dir: str = ".") -> dict:
    """Config for the toy benchmark written by ``maketoy``; sized for a laptop."""
    d = data_dir.rstrip("/")
    return {
        "seed": 0,
        "schema": f"{d}/schema.json",
        "ranges": f"{d}/ranges.json",
        "silos": {"A": f"{d}/A.csv", "B": f"{d}/B.csv", "C": f"{d}/C.csv"},
        "external": {"X": f"{d}/X.csv"},
        "ganomaly": {"latent_dim": 8, "hidden": [128, 64, 32], "lr": 1e-3, "local_epochs": 50},
        "federation": {"rounds": 10, "local_epochs": 50},
        "evaluation": {"q": 0.95},
        "generate": {"n": 10000},
    }
