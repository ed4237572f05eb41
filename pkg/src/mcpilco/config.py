"""Run configuration: YAML file, strict keys, per-robot defaults.

Layout (every key optional; unknown keys are an error)::

    robot: pendubot            # or acrobot
    seed: 0
    output_dir: runs/pendubot
    plant:
      masses: [0.6, 0.6]       # kg
      lengths: [0.3, 0.2]      # m
      com: [0.3, 0.2]          # m, joint to centre of mass
      inertias: [0.054, 0.024] # kg m^2, about the joint axis
      damping: [0.001, 0.001]  # N m s / rad
      gravity: 9.81
      torque_limit: 10.0       # N m
    # the acrobot defaults swap the links (0.2 m inner, 0.3 m outer) and use 6 N m
    sim:      {dt: 0.002, control_dt: 0.02, horizon: 10.0}
    cost:     {goal: [3.14159.., 0.0], ell_c: 3.0, horizon: 3.0}
    gp:       {n_inducing: 400, max_iter: 200, max_fit_points: 1500}
    policy:   {n_basis: 200, u_max_fraction: 0.25}
    optimizer: {n_particles: 400, learning_rate: 0.01, max_iters: 1000, ...}
    trials:   {n_trials: 6, explore_duration: 3.0, stop_on_success: true}
    stabilizer: {Q: [10, 10, 1, 1], R: 1.0, roa_samples: 64, roa_seed: 0}  # design is independent of seed
    harness:  {seeds: [0, 1, 2], perturbations: {torque-noise: [0.0, 0.1], ...}, parameter: m2}
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, fields

import yaml

from mcpilco.objective import CostConfig
from mcpilco.optimizer import OptimConfig, TrialConfig
from mcpilco.plant import ROBOTS, PlantParams, SimConfig
from mcpilco.harness import DEFAULT_GRIDS, PERTURBATION_KINDS


class ConfigError(ValueError):
    pass


_OPTIM_KEYS = [f.name for f in fields(OptimConfig) if f.name not in ("horizon", "control_dt", "seed")]

ROBOT_DEFAULTS = {
    "pendubot": {"cost": {"horizon": 3.0}, "stabilizer": {"Q": [10.0, 10.0, 1.0, 1.0], "R": 1.0}},
    # long outer link: with the pendubot geometry the elbow cannot pump the shoulder
    "acrobot": {
        "plant": {"lengths": [0.2, 0.3], "com": [0.2, 0.3], "inertias": [0.024, 0.054], "torque_limit": 6.0},
        "cost": {"horizon": 2.0},
        "stabilizer": {"Q": [10.0, 10.0, 1.0, 1.0], "R": 1.0},
    },
}

BASE_DEFAULTS = {
    "robot": "pendubot",
    "seed": 0,
    "output_dir": "runs/default",
    "plant": {
        "masses": [0.6, 0.6],
        "lengths": [0.3, 0.2],
        "com": [0.3, 0.2],
        "inertias": [0.054, 0.024],
        "damping": [0.001, 0.001],
        "gravity": 9.81,
        "torque_limit": 10.0,
    },
    "sim": {"dt": 1.0 / 500.0, "control_dt": 1.0 / 50.0, "horizon": 10.0},
    "cost": {"goal": [math.pi, 0.0], "ell_c": 3.0, "horizon": 3.0},
    "gp": {"n_inducing": 400, "max_iter": 200, "max_fit_points": 1500},
    "policy": {"n_basis": 200, "u_max_fraction": 0.25},
    "optimizer": {k: getattr(OptimConfig(), k) for k in _OPTIM_KEYS},
    "trials": {"n_trials": 6, "explore_duration": 3.0, "stop_on_success": True},
    "stabilizer": {"Q": [10.0, 10.0, 1.0, 1.0], "R": 1.0, "roa_samples": 64, "roa_seed": 0},
    "harness": {
        "seeds": [0, 1, 2],
        "perturbations": {k: list(v) for k, v in DEFAULT_GRIDS.items()},
        "parameter": "m2",
    },
}

# sections whose sub-keys are free-form
_OPEN_SECTIONS = {("harness", "perturbations")}


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    unknown = []
    for key, value in override.items():
        here = path + (key,)
        if key not in base:
            unknown.append(".".join(here))
            continue
        if isinstance(base[key], dict) and here not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(here)} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return out


def resolve(raw: dict | None = None, **overrides) -> dict:
    """Full config dict: base defaults, then robot defaults, then the file, then overrides."""
    raw = dict(raw or {})
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    robot = raw.get("robot", BASE_DEFAULTS["robot"])
    if robot not in ROBOTS:
        raise ConfigError(f"robot must be one of {ROBOTS}, got {robot!r}")
    cfg = _merge(BASE_DEFAULTS, ROBOT_DEFAULTS[robot])
    cfg = _merge(cfg, raw)
    kinds = set(cfg["harness"]["perturbations"]) - set(PERTURBATION_KINDS)
    if kinds:
        raise ConfigError(f"unknown perturbation kinds: {', '.join(sorted(kinds))}")
    build(cfg)  # validates values
    return cfg


def load(path, **overrides) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    return resolve(raw, **overrides)


def dump(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    robot: str
    seed: int
    output_dir: str
    plant: PlantParams
    sim: SimConfig
    cost: CostConfig
    optim: OptimConfig
    trials: TrialConfig
    stabilizer: dict
    harness: dict
    stop_on_success: bool
    raw: dict


def build(cfg: dict) -> RunConfig:
    """Typed config objects from a resolved dict."""
    try:
        pl = cfg["plant"]
        plant = PlantParams(
            m1=pl["masses"][0], m2=pl["masses"][1], l1=pl["lengths"][0], l2=pl["lengths"][1],
            r1=pl["com"][0], r2=pl["com"][1], I1=pl["inertias"][0], I2=pl["inertias"][1],
            b1=pl["damping"][0], b2=pl["damping"][1], g=pl["gravity"],
            torque_limit=pl["torque_limit"], robot=cfg["robot"],
        )
        sim = SimConfig(**cfg["sim"])
        c = cfg["cost"]
        cost = CostConfig(goal=tuple(c["goal"]), ell_c=c["ell_c"], horizon=c["horizon"], control_dt=sim.control_dt)
        optim = OptimConfig(horizon=c["horizon"], control_dt=sim.control_dt, seed=int(cfg["seed"]), **cfg["optimizer"])
        g = cfg["gp"]
        trials = TrialConfig(
            n_trials=cfg["trials"]["n_trials"],
            n_basis=cfg["policy"]["n_basis"],
            u_max_fraction=cfg["policy"]["u_max_fraction"],
            explore_duration=cfg["trials"]["explore_duration"],
            n_inducing=g["n_inducing"],
            gp_max_iter=g["max_iter"],
            gp_max_fit_points=g["max_fit_points"],
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return RunConfig(
        cfg["robot"], int(cfg["seed"]), cfg["output_dir"], plant, sim, cost, optim, trials,
        cfg["stabilizer"], cfg["harness"], bool(cfg["trials"]["stop_on_success"]), cfg,
    )
