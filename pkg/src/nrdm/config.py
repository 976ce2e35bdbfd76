"""Run configuration: TOML file with sections, documented defaults, overrides.

Unknown keys are rejected (typo safety) and path-valued fields resolve
relative to the config file. Command-line ``--set section.key=value`` entries
override file values with type coercion against the default.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

__all__ = ["ConfigError", "DEFAULTS", "load_config", "apply_overrides", "default_config"]


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


# Every field has a default; the CLI documents these via `--help-config`.
DEFAULTS: dict = {
    "model": {
        "fashion": "flow",          # flow | u
        "depth": 8,
        "width": 64,
        "mapper": "mlp2",           # affine | mlp2 | linear-scalar
        "hidden": 0,                # 0 -> same as width
        "activation": "tanh",       # tanh | silu
        "conditioning": "concat",   # none | concat | film
        "gate_mode": "scalar",      # scalar | channel
        "variant": "v0",            # v0..v4
        "out_scale": 1.0,           # readout init scale of the score net
        "alpha_init": 1.0,          # gate scale at initialization
        "beta_init": 0.0,           # gate shift at initialization
        "mapper_out_scale": 1.0,    # init scale inside each unit's mapper
    },
    "schedule": {
        "kind": "vp",               # vp | ve | ou
        "beta_min": 0.1,
        "beta_max": 20.0,
        "sigma_min": 0.01,
        "sigma_max": 8.0,
        "rate": 1.0,                # ou mean-reversion rate
        "table": "",                # optional CSV (t,alpha_bar) for the discrete process
    },
    "train": {
        "steps": 1000,
        "batch": 128,
        "lr": 5e-4,
        "optimizer": "adamw",       # adamw | sgd
        "weight_decay": 0.0,
        "gamma": 0.35,              # gate-penalty weight
        "ema_decay": 0.999,
        "objective": "score-matching",      # score-matching | eps-prediction
        "score_target": "analytic-oracle",  # analytic-oracle | denoising-estimate
        "t_min": 1e-3,
        "log_every": 50,
        "report_every": 0,          # sensitivity profile cadence; 0 disables
        "freeze": "none",           # none | theta (gates-only) | gates (mappers-only)
    },
    "data": {
        "family": "gaussian-mixture-2d",
        "size": 10000,
        "noise": 0.05,
        "weights": [0.5, 0.5],
        "means": [[-1.5, 0.0], [1.5, 0.0]],
        "variances": [0.3, 0.3],
        "n_classes": 4,
    },
    "eval": {
        "n_samples": 4000,
        "solver": "heun",           # euler | heun
        "steps": 200,
        "n_projections": 128,
        "bandwidth": 0.0,           # 0 -> median heuristic
        "t_grid_points": 20,        # pfode-check grid
        "substeps": 20,             # pfode-check integration substeps per grid cell
    },
    "report": {
        "depths": [8, 16, 32, 64],  # depth-scaling sweep
        "seeds": [0, 1, 2, 3, 4],   # variants sweep
        "ungated": True,            # sensitivity: also emit the pinned-gate series
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {where} must be a table")
            _merge(base[key], value, where)
        else:
            base[key] = _coerce(where, base[key], value)


def _coerce(where: str, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, float)) \
            and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, list) and isinstance(value, list):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def load_config(path: str | Path | None, overrides=()) -> dict:
    """Defaults, overlaid with the file (if any), then ``--set`` overrides."""
    cfg = default_config()
    sections_present: set[str] = set()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                loaded = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        sections_present = set(loaded)
        _merge(cfg, loaded)
        # paths in the file resolve relative to the file itself
        if cfg["schedule"]["table"]:
            cfg["schedule"]["table"] = str((p.parent / cfg["schedule"]["table"]).resolve())
    cfg["_sections_present"] = sorted(sections_present)
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: dict, overrides) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        if section not in DEFAULTS or section.startswith("_"):
            raise ConfigError(f"unknown config section: {section}")
        if name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key: {section}.{name}")
        default = DEFAULTS[section][name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare string
        cfg[section][name] = _coerce(f"{section}.{name}", default, value)
