"""Saturated distance-to-goal cost and its cumulative sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np


@dataclass(frozen=True)
class CostConfig:
    """Cost settings.

    The weighted distance is ``|q - goal|^2 / ell_c`` on unwrapped angles,
    so a trajectory that reaches the goal through ``-pi`` is charged as
    being far away.
    """

    goal: tuple[float, float] = (math.pi, 0.0)
    ell_c: float = 3.0
    horizon: float = 3.0
    control_dt: float = 1.0 / 50.0

    def __post_init__(self):
        if self.ell_c <= 0:
            raise ValueError("ell_c must be positive")
        ratio = self.horizon / self.control_dt
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("horizon must be a positive integer multiple of control_dt")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.control_dt))


def step_cost(cfg: CostConfig, x):
    """``1 - exp(-|q - goal|^2 / ell_c)`` for states ``(..., 4)``.

    JAX inputs (including tracers) give JAX outputs; anything else is
    treated as numpy.
    """
    xp = jnp if isinstance(x, jax.Array) else np
    x = xp.asarray(x, dtype=xp.float64)
    d = x[..., :2] - xp.asarray(cfg.goal)
    return 1.0 - xp.exp(-(d * d).sum(-1) / cfg.ell_c)


def cumulative_cost(cfg: CostConfig, trajectory):
    """Sum of step costs over a trajectory ``(T+1, 4)`` sampled at the control period."""
    return step_cost(cfg, trajectory).sum()
