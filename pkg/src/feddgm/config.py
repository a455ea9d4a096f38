"""Experiment configuration: JSON schema, defaults, flag overrides, and the
reproduction manifest.

A config file is plain JSON. Every run resolves it against the defaults
below, validates it, and echoes the fully resolved config into
``manifest.json`` next to the outputs; re-running from that manifest
reproduces the run.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import jsonschema

from . import __version__
from .datasets import BUILTIN_NAMES
from .distill import DistillConfig
from .federation import METHODS, FedConfig
from .generator import GeneratorConfig
from .models import FAMILIES, ModelSpec, scaled_up

ENV_OUTPUT_ROOT = "FEDDGM_OUTPUT_ROOT"

DEFAULTS = {
    "dataset": {"name": "tiny-digits", "params": {"n": 1500, "seed": 0}},
    "proxy_fraction": 0.25,
    "test_fraction": 0.25,
    "data_seed": 0,
    "method": "feddgm",
    "clients": 10,
    "participants": None,
    "rounds": 5,
    "alpha": 0.5,
    "seeds": [0],
    "surrogate": {"family": "convnet", "depth": 2, "width": 8},
    "global_model": None,
    "distill": {
        "local_epochs": 20, "student_steps": 20, "distill_iters": 100,
        "lr_local": 0.2, "lr_student": 0.5, "lr_latent": 0.3,
        "latent_optimizer": "adam", "latent_momentum": 0.0,
        "ipc": 10, "layer": None, "batch_local": 1_000_000, "prox_mu": 0.0,
    },
    "generator": {
        "style_dim": 16, "width": 16, "blocks": 4, "embed_dim": 8,
        "map_hidden": 32, "enc_hidden": 64, "epochs": 300, "batch": 64,
        "map_epochs": 500, "lr": 3e-3, "map_lr": 1e-2, "target_mse": 0.01,
    },
    "global_epochs": 100,
    "lr_global": 0.1,
    "batch_global": 64,
    "prox_mu": 0.0,
    "accumulate_synth": False,
    "precision": "f32",
    "dump_synth": False,
    "output_dir": "runs/run",
    "workers": 1,
    "sweep": {},
}

_MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "family": {"enum": list(FAMILIES)},
        "depth": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
    },
    "required": ["family", "depth", "width"],
    "additionalProperties": False,
}

SCHEMA = {
    "type": "object",
    "properties": {
        "dataset": {
            "type": "object",
            "properties": {
                "name": {"type": "string"},
                "path": {"type": "string"},
                "params": {"type": "object"},
            },
            "additionalProperties": False,
        },
        "proxy_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "data_seed": {"type": "integer"},
        "method": {"enum": list(METHODS)},
        "clients": {"type": "integer", "minimum": 1},
        "participants": {"type": ["integer", "null"], "minimum": 1},
        "rounds": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "surrogate": _MODEL_SCHEMA,
        "global_model": {"anyOf": [{"type": "null"}, _MODEL_SCHEMA]},
        "distill": {
            "type": "object",
            "properties": {
                "local_epochs": {"type": "integer", "minimum": 1},
                "student_steps": {"type": "integer", "minimum": 1},
                "distill_iters": {"type": "integer", "minimum": 0},
                "lr_local": {"type": "number", "minimum": 0},
                "lr_student": {"type": "number", "minimum": 0},
                "lr_latent": {"type": "number", "minimum": 0},
                "latent_optimizer": {"enum": ["sgd", "adam"]},
                "latent_momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "ipc": {"type": "integer", "minimum": 1},
                "layer": {"type": ["integer", "null"], "minimum": 0},
                "batch_local": {"type": "integer", "minimum": 1},
                "prox_mu": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "generator": {
            "type": "object",
            "properties": {
                "style_dim": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "blocks": {"type": "integer", "minimum": 2},
                "embed_dim": {"type": "integer", "minimum": 1},
                "map_hidden": {"type": "integer", "minimum": 1},
                "enc_hidden": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "batch": {"type": "integer", "minimum": 1},
                "map_epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "map_lr": {"type": "number", "exclusiveMinimum": 0},
                "target_mse": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "global_epochs": {"type": "integer", "minimum": 1},
        "lr_global": {"type": "number", "exclusiveMinimum": 0},
        "batch_global": {"type": "integer", "minimum": 1},
        "prox_mu": {"type": "number", "minimum": 0},
        "accumulate_synth": {"type": "boolean"},
        "precision": {"enum": ["f32", "f64"]},
        "dump_synth": {"type": "boolean"},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "sweep": {
            "type": "object",
            "properties": {
                "alpha": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "ipc": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "layer": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "local_epochs": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "surrogate_depth": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

SWEEP_AXES = ("alpha", "ipc", "layer", "local_epochs", "surrogate_depth")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` points at the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# blocks replaced wholesale when the user provides them (merging the
# default dataset name into a user-supplied path would be nonsense)
_ATOMIC_KEYS = ("dataset", "sweep")


def _deep_merge(base: dict, override: dict, atomic=()) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in atomic and isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- file <- flag overrides, validated. A manifest file (with
    a ``resolved`` key) is accepted directly, which is what makes re-running
    from a manifest work."""
    file_cfg = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        if "resolved" in file_cfg:
            file_cfg = file_cfg["resolved"]
    cfg = _deep_merge(DEFAULTS, file_cfg, atomic=_ATOMIC_KEYS)
    if overrides:
        cfg = _deep_merge(cfg, overrides, atomic=_ATOMIC_KEYS)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    # friendly semantic checks first, then the structural schema
    if isinstance(cfg.get("alpha"), (int, float)) and cfg["alpha"] <= 0:
        raise ConfigError("alpha must be positive", "alpha")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path)
    if cfg["participants"] is not None and cfg["participants"] > cfg["clients"]:
        raise ConfigError("participants cannot exceed clients", "participants")
    ds = cfg["dataset"]
    if ("name" in ds) == ("path" in ds):
        raise ConfigError("dataset needs exactly one of 'name' or 'path'", "dataset")
    if "name" in ds and ds["name"] not in BUILTIN_NAMES:
        raise ConfigError(
            f"unknown builtin {ds['name']!r} (choices: {', '.join(BUILTIN_NAMES)})",
            "dataset.name")


def resolve_output_dir(cfg: dict) -> Path:
    root = os.environ.get(ENV_OUTPUT_ROOT)
    out = Path(cfg["output_dir"])
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def model_spec_from(cfg_block: dict, input_shape, classes) -> ModelSpec:
    return ModelSpec(cfg_block["family"], cfg_block["depth"],
                     cfg_block["width"], tuple(input_shape), classes)


def build_fed_config(cfg: dict, seed: int, input_shape, classes) -> FedConfig:
    surrogate = model_spec_from(cfg["surrogate"], input_shape, classes)
    global_model = (model_spec_from(cfg["global_model"], input_shape, classes)
                    if cfg["global_model"] else scaled_up(surrogate))
    return FedConfig(
        clients=cfg["clients"], participants=cfg["participants"],
        rounds=cfg["rounds"], method=cfg["method"], alpha=cfg["alpha"],
        surrogate=surrogate, global_model=global_model,
        distill=DistillConfig(**cfg["distill"]),
        global_epochs=cfg["global_epochs"], lr_global=cfg["lr_global"],
        batch_global=cfg["batch_global"], prox_mu=cfg["prox_mu"], seed=seed,
        accumulate_synth=cfg["accumulate_synth"], precision=cfg["precision"])


def build_generator_config(cfg: dict, seed: int) -> GeneratorConfig:
    return GeneratorConfig(seed=seed, **cfg["generator"])


def write_manifest(path, cfg: dict, argv: list[str], extras: dict | None = None) -> None:
    manifest = {
        "tool": "feddgm",
        "version": __version__,
        "invocation": list(argv),
        "resolved": cfg,
    }
    if extras:
        manifest.update(extras)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
