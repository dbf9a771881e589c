"""Run configuration: YAML file, schema defaults, validation, provenance.

Every key has a default below; a config file only lists what it changes.
Unknown keys and values of the wrong type are rejected before any work
starts. ``--set section.key=value`` overrides use YAML scalar syntax.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .mpc import (HCCI_DU_MAX, HCCI_DU_MIN, HCCI_Q1_DIAG, HCCI_Q2_DIAG, HCCI_U_MAX,
                  HCCI_U_MIN, HCCI_Y_MAX, HCCI_Y_MIN, MpcConfig)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out_dir": "out",
    "plot": False,
    "paths": {
        "data_dir": None,   # default: out_dir
        "model": None,      # default: out_dir/model.txt
        "plant_model": None,  # ELM used as the plant; default: the controller model
    },
    "data": {
        "plant": "synthetic",
        "train_length": 16000,
        "test_length": 7000,
        "msap_length": 2400,
        "hold_min": 5,
        "hold_max": 30,
        "level_lo": list(HCCI_U_MIN),
        "level_hi": list(HCCI_U_MAX),
        "noise": False,
    },
    "train": {
        "mode": "cv",
        "split": 0.7,
        "grid": {"n_h": [10, 20, 40, 80], "lam": [1e-4, 1e-3, 1e-2, 1e-1], "order": [1, 2]},
        "fixed": {"n_h": 20, "lam": 1e-3, "order": 1},
    },
    "eval": {
        "horizon": 600,
    },
    "simulate": {
        "scenario": "step",
        "cycles": 600,
        "plant": "elm",
        "hold": 50,
        "min_step": [0.3, 2.0],
        "amplitude": [0.25, 2.0],
        "period": [200.0, 200.0],
        "reference": None,
        "noise": {"enabled": True, "variances": [0.0012, 1.76], "seed": None},
        "fallback_budget": 50,
        "mpc": {
            "N_y": 3,
            "N_u": 3,
            "q1_diag": list(HCCI_Q1_DIAG),
            "q2_diag": list(HCCI_Q2_DIAG),
            "u_min": list(HCCI_U_MIN),
            "u_max": list(HCCI_U_MAX),
            "du_min": list(HCCI_DU_MIN),
            "du_max": list(HCCI_DU_MAX),
            "y_min": list(HCCI_Y_MIN),
            "y_max": list(HCCI_Y_MAX),
            "rmax_bound": None,  # set automatically for step_rmax_constrained
            "qp": {"max_iter": 200000, "tol": 1e-8, "check_every": 500},
        },
    },
}

# keys whose value is free-form (not validated against a nested default)
_OPEN = {("simulate", "reference")}


def _type_ok(default, value) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def merge(base: dict, update: dict, path=()) -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = ".".join(path + (str(key),))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if path + (key,) in _OPEN:
            out[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = merge(base[key], value, path + (key,))
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(f"{where!r} has wrong type {type(value).__name__}")
            out[key] = float(value) if isinstance(base[key], float) and value is not None else value
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``/``--out-dir``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version {raw['schema_version']} unsupported "
                              f"(expected {SCHEMA_VERSION})")
        cfg = merge(cfg, raw)
    for ov in overrides:
        cfg = merge(cfg, parse_override(ov))
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    d = cfg["data"]
    if d["plant"] not in ("synthetic", "elm"):
        raise ConfigError("data.plant must be 'synthetic' or 'elm'")
    for k in ("train_length", "test_length", "msap_length"):
        if d[k] < 1:
            raise ConfigError(f"data.{k} must be >= 1")
    if not 1 <= d["hold_min"] <= d["hold_max"]:
        raise ConfigError("need 1 <= data.hold_min <= data.hold_max")
    if len(d["level_lo"]) != len(d["level_hi"]) or any(
            hi <= lo for lo, hi in zip(d["level_lo"], d["level_hi"])):
        raise ConfigError("data.level_hi must exceed data.level_lo channel by channel")
    t = cfg["train"]
    if t["mode"] not in ("cv", "fixed"):
        raise ConfigError("train.mode must be 'cv' or 'fixed'")
    if t["mode"] == "cv" and not all(t["grid"][k] for k in ("n_h", "lam", "order")):
        raise ConfigError("train.mode is 'cv' but the grid is empty")
    if not 0 < t["split"] < 1:
        raise ConfigError("train.split must lie in (0, 1)")
    if cfg["eval"]["horizon"] < 1:
        raise ConfigError("eval.horizon must be >= 1")
    s = cfg["simulate"]
    if s["scenario"] not in ("step", "step_rmax_constrained", "sinusoid"):
        raise ConfigError("simulate.scenario must be step, step_rmax_constrained or sinusoid")
    if s["plant"] not in ("synthetic", "elm"):
        raise ConfigError("simulate.plant must be 'synthetic' or 'elm'")
    if s["cycles"] < 1:
        raise ConfigError("simulate.cycles must be >= 1")
    if s["reference"] is not None and (not isinstance(s["reference"], dict) or "kind" not in s["reference"]):
        raise ConfigError("simulate.reference must be a mapping with a 'kind' key")
    mpc_config(cfg)


def mpc_config(cfg: dict, rmax_bound=None) -> MpcConfig:
    """Controller settings from the ``simulate.mpc`` section."""
    c = cfg["simulate"]["mpc"]
    bound = c["rmax_bound"] if rmax_bound is None else rmax_bound
    x_min = x_max = None
    if bound is not None:
        x_min = np.full(6, -np.inf)
        x_max = np.full(6, np.inf)
        x_max[3] = bound
    try:
        return MpcConfig(
            N_y=c["N_y"], N_u=c["N_u"], Q1=np.diag(c["q1_diag"]), Q2=np.diag(c["q2_diag"]),
            u_min=c["u_min"], u_max=c["u_max"], du_min=c["du_min"], du_max=c["du_max"],
            y_min=c["y_min"], y_max=c["y_max"], x_min=x_min, x_max=x_max,
            qp_options=dict(c["qp"]),
        )
    except ValueError as exc:
        raise ConfigError(f"simulate.mpc: {exc}") from exc


# settings that change where or how outputs are written, not their content
_UNHASHED = ("out_dir", "plot")


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k not in _UNHASHED}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(cfg: dict, command: str, extra=()) -> list[str]:
    """Header lines for every emitted file; no timestamps, so reruns compare equal."""
    import scipy

    return [
        f"elmpc {__version__} command={command}",
        f"config_sha256={config_hash(cfg)} seed={cfg['seed']}",
        f"numpy {np.__version__} scipy {scipy.__version__}",
        *extra,
    ]


def dump(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))
