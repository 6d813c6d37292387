"""Experiment configuration: schema, defaults, resolution, seeding."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "nonlinearity": {"name": "sqrt_saturable", "params": {"sigma": 0.5}},
    "omega": 0.5,
    "omega_range": None,            # [lo, hi, step] for branch work
    "grid": {"L": 40.0, "n": 512},
    "dynamics": {
        "L": 40.0, "n": 1024, "dt": 1e-3, "T": 500.0,
        "snapshot_stride": 250, "conservation_tol": 1e-8, "order": 4,
        "epsilon": 0.01, "perturbation": "mode",   # "mode" | "gauss" | "prepared"
        "z0": 0.03,
    },
    "tolerances": {"gamma_threshold": 1e-6, "h2_exponent_slack": 0.1},
    "seed": 1234,
    "out_dir": "runs/latest",
}

_ALLOWED_TOP = set(DEFAULTS) | {"override_hypotheses", "label"}


class ConfigError(ValueError):
    """Schema violation in an experiment configuration."""


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def rng(self, stream: str) -> np.random.Generator:
        """Named substream: all randomness flows from the single seed."""
        digest = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "big")
        return np.random.default_rng([self.seed, digest % (2**31)])

    def nonlinearity(self):
        from solstab.nonlinearity import make_nonlinearity
        spec = self.raw["nonlinearity"]
        return make_nonlinearity(spec["name"], **spec.get("params", {}))

    def grid(self):
        from solstab.fields import make_grid
        g = self.raw["grid"]
        return make_grid(g["L"], g["n"])

    def dynamics_grid(self):
        from solstab.fields import make_grid
        g = self.raw["dynamics"]
        return make_grid(g["L"], g["n"])

    def omega_mesh(self) -> np.ndarray:
        rr = self.raw.get("omega_range")
        if rr is None:
            w = float(self.raw["omega"])
            return np.array([w - 0.02, w, w + 0.02])
        lo, hi, step = rr
        return np.arange(lo, hi + step / 2, step)

    def resolved(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
        unknown = set(user) - _ALLOWED_TOP
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if int(user.get("schema", SCHEMA_VERSION)) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {user.get('schema')}")
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k].update(v)
            else:
                raw[k] = v
    if overrides:
        for k, v in overrides.items():
            if v is None:
                continue
            if isinstance(v, dict) and isinstance(raw.get(k), dict):
                raw[k].update(v)
            else:
                raw[k] = v
    _validate(raw)
    return ExperimentConfig(raw=raw)


def _validate(raw: dict):
    g = raw["grid"]
    if g["n"] < 64 or g["n"] & (g["n"] - 1):
        raise ConfigError("grid.n must be a power of two >= 64")
    if raw["omega"] is not None and raw["omega"] <= 0:
        raise ConfigError("omega must be positive")
    d = raw["dynamics"]
    if d["dt"] <= 0 or d["T"] <= 0:
        raise ConfigError("dynamics dt and T must be positive")
    nl = raw["nonlinearity"]
    if "name" not in nl:
        raise ConfigError("nonlinearity.name is required")


def write_resolved(cfg: ExperimentConfig, out_dir: Path, timestamp: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved()
    resolved["timestamp"] = timestamp
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
    return resolved
