"""Experiment configuration: a TOML file of dotted keys plus ``key=value`` overrides.

Tables and dotted keys are interchangeable, so ``[grid]\\nwidth = 20`` and
``grid.width = 20`` mean the same thing. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "env.kind": "clover",
    "grid.width": 20,
    "grid.height": 20,
    "grid.obstacle_density": 0.05,
    "obs.mode": "random",
    "obs.dim": 64,
    "obs.scale": 4.0,
    "collect.steps": 50_000,
    "q.backend": "tabular",
    "q.exact": False,
    "q.steps": 20_000,
    "q.batch": 256,
    "q.lr": 1.0,
    "q.target_sync_every": 500,
    "q.gamma": 0.95,
    "q.geom_p": 0.1,
    "q.optimizer": "sgd",
    "q.hidden": 128,
    "q.eq_tol": -1.0,
    "q.cq_fraction": 1.0,
    "embed.arch": "mlp",
    "embed.latent_dim": 16,
    "embed.hidden": 64,
    "embed.d_p": 1.0,
    "embed.c_q": 0.0,
    "embed.w_q": 1.0,
    "embed.w_time": 1.0,
    "embed.w_inv": 1.0,
    "embed.w_fwd": 1.0,
    "embed.steps": 3000,
    "embed.batch": 256,
    "embed.lr": 1e-3,
    "embed.t_max": 10,
    "embed.margin": 0.0,
    "per.l_max": 20,
    "per.dp_fraction": 0.5,
    "planner.r": 10,
    "planner.num_vertices": 300,
    "planner.sampling": "uniform",
    "planner.iterations": 500,
    "eval.bands": [4, 8, 12],
    "eval.pairs_per_band": 200,
    "eval.success_radius": 1.0,
    "eval.budget_multiplier": 4,
    "eval.mode": "euclidean",
    "refine.rounds": 1,
    "refine.goals_per_round": 200,
    "refine.bands": list(range(1, 15)),
    "refine.keep_only_successes": True,
    "refine.match_size": True,
    "report.max_bfs": 15,
    "report.pairs_per_bin": 200,
    "report.false_edge_slack": 2.0,
}


class ConfigError(ValueError):
    pass


def _flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else [int(v) for v in value.split(",")]
        return [int(v) for v in value]
    try:
        return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from exc


class Config:
    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key: str):
        return self.values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _coerce(key, value)

    def with_overrides(self, **kw) -> "Config":
        new = Config(self.values)
        for k, v in kw.items():
            new[k.replace("__", ".")] = v
        return new

    def update(self, pairs: dict[str, object]) -> "Config":
        new = Config(self.values)
        for k, v in pairs.items():
            new[k] = v
        return new

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    values: dict[str, object] = {}
    if path is not None:
        try:
            with open(Path(path), "rb") as fh:
                values = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return Config(values)
