"""Two-link pendulum dynamics and a fixed-step RK4 simulator.

Angles follow the usual double-pendulum convention: ``q = [0, 0]`` is the
hanging rest position, ``q = [pi, 0]`` is upright, and ``q2`` is the elbow
angle relative to the first link. States are flat arrays
``[q1, q2, qd1, qd2]``.

The equations of motion are written once, in terms of plain arithmetic plus
``sin``/``cos``, so the same code runs on Python floats (fast scalar
simulation), numpy arrays (batched simulation) and JAX arrays
(differentiable prior mean).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

ROBOTS = ("pendubot", "acrobot")
LOG_HEADER = ("t", "q1", "q2", "qd1", "qd2", "u1", "u2")

HANGING = np.zeros(4)
UPRIGHT = np.array([math.pi, 0.0, 0.0, 0.0])


class DomainError(ValueError):
    """Raised when the plant is fed a non-finite state or torque."""


@dataclass(frozen=True)
class PlantParams:
    """Physical parameters of the double pendulum.

    ``I1`` and ``I2`` are inertias about the joint axes, so a point mass at
    distance ``r`` contributes ``m r**2``. The defaults are surrogate values
    of the right order of magnitude, not the competition's hardware.
    """

    m1: float = 0.6
    m2: float = 0.6
    l1: float = 0.3
    l2: float = 0.2
    r1: float = 0.3
    r2: float = 0.2
    I1: float = 0.054
    I2: float = 0.024
    b1: float = 0.001
    b2: float = 0.001
    g: float = 9.81
    torque_limit: float = 6.0
    robot: str = "pendubot"

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "r1", "r2", "I1", "I2", "g", "torque_limit"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        for name in ("b1", "b2"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.robot not in ROBOTS:
            raise ValueError(f"robot must be one of {ROBOTS}, got {self.robot!r}")

    @property
    def actuated(self) -> int:
        """Index of the actuated joint (0 for Pendubot, 1 for Acrobot)."""
        return 0 if self.robot == "pendubot" else 1

    @property
    def B(self) -> np.ndarray:
        return np.diag([1.0, 0.0] if self.robot == "pendubot" else [0.0, 1.0])

    def replace(self, **changes) -> "PlantParams":
        return PlantParams(**{**asdict(self), **changes})

    def scaled(self, factors: dict[str, float]) -> "PlantParams":
        """Copy with selected parameters multiplied by the given factors."""
        return self.replace(**{k: getattr(self, k) * v for k, v in factors.items()})


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 500.0
    control_dt: float = 1.0 / 50.0
    horizon: float = 10.0

    def __post_init__(self):
        if self.dt <= 0 or self.control_dt <= 0 or self.horizon <= 0:
            raise ValueError("dt, control_dt and horizon must be positive")
        ratio = self.control_dt / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"control_dt ({self.control_dt}) must be an integer multiple of dt ({self.dt})"
            )

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def _accel(p: PlantParams, q1, q2, qd1, qd2, u1, u2, sin, cos):
    """q'' = M(q)^-1 (B u - n(q, q')) for any array backend."""
    s2, c2 = sin(q2), cos(q2)
    s1, s12 = sin(q1), sin(q1 + q2)
    h = p.m2 * p.l1 * p.r2
    m11 = p.I1 + p.I2 + p.m2 * p.l1**2 + 2.0 * h * c2
    m12 = p.I2 + h * c2
    m22 = p.I2
    # Coriolis/centrifugal + gravity + viscous damping
    n1 = (
        -h * s2 * (2.0 * qd1 * qd2 + qd2 * qd2)
        + p.g * ((p.m1 * p.r1 + p.m2 * p.l1) * s1 + p.m2 * p.r2 * s12)
        + p.b1 * qd1
    )
    n2 = h * s2 * qd1 * qd1 + p.g * p.m2 * p.r2 * s12 + p.b2 * qd2
    if p.robot == "pendubot":
        f1, f2 = u1 - n1, -n2
    else:
        f1, f2 = -n1, u2 - n2
    det = m11 * m22 - m12 * m12
    return (m22 * f1 - m12 * f2) / det, (m11 * f2 - m12 * f1) / det


def clip_torque(params: PlantParams, u) -> np.ndarray:
    """Mask the torque to the actuated joint and saturate it at the limit."""
    u = np.broadcast_to(np.asarray(u, dtype=float), (2,))
    out = np.zeros(2)
    j = params.actuated
    out[j] = min(max(u[j], -params.torque_limit), params.torque_limit)
    return out


def forward_dynamics(params: PlantParams, s, u) -> np.ndarray:
    """Joint accelerations for a single state and torque 2-vector.

    The torque is clipped to ``[-torque_limit, torque_limit]`` and masked by
    the actuation matrix before use.
    """
    s = np.asarray(s, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    if s.shape != (4,):
        raise ValueError(f"state must have shape (4,), got {s.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u_arr))):
        raise DomainError(f"non-finite state or torque: s={s}, u={u_arr}")
    u_c = clip_torque(params, u_arr)
    a1, a2 = _accel(params, *s, *u_c, math.sin, math.cos)
    return np.array([a1, a2])


def forward_dynamics_batch(params: PlantParams, s, u, backend=np):
    """Vectorised accelerations.

    ``s`` has shape ``(..., 4)`` and ``u`` is the scalar torque on the
    actuated joint with shape ``(...)``. ``backend`` is ``numpy`` or
    ``jax.numpy``; no clipping is applied, callers saturate beforehand.
    """
    q1, q2, qd1, qd2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    if params.robot == "pendubot":
        u1, u2 = u, 0.0
    else:
        u1, u2 = 0.0, u
    a1, a2 = _accel(params, q1, q2, qd1, qd2, u1, u2, backend.sin, backend.cos)
    return backend.stack([a1, a2], -1)


def _rk4_scalar(p: PlantParams, x: list[float], u1: float, u2: float, h: float) -> list[float]:
    sin, cos = math.sin, math.cos
    q1, q2, v1, v2 = x
    a1, a2 = _accel(p, q1, q2, v1, v2, u1, u2, sin, cos)
    k2q1, k2q2 = v1 + 0.5 * h * a1, v2 + 0.5 * h * a2
    b1, b2 = _accel(p, q1 + 0.5 * h * v1, q2 + 0.5 * h * v2, k2q1, k2q2, u1, u2, sin, cos)
    k3q1, k3q2 = v1 + 0.5 * h * b1, v2 + 0.5 * h * b2
    c1, c2 = _accel(p, q1 + 0.5 * h * k2q1, q2 + 0.5 * h * k2q2, k3q1, k3q2, u1, u2, sin, cos)
    k4q1, k4q2 = v1 + h * c1, v2 + h * c2
    d1, d2 = _accel(p, q1 + h * k3q1, q2 + h * k3q2, k4q1, k4q2, u1, u2, sin, cos)
    return [
        q1 + h / 6.0 * (v1 + 2.0 * k2q1 + 2.0 * k3q1 + k4q1),
        q2 + h / 6.0 * (v2 + 2.0 * k2q2 + 2.0 * k3q2 + k4q2),
        v1 + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1),
        v2 + h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2),
    ]


def step_rk4(params: PlantParams, config: SimConfig, s, u, dt: float | None = None) -> np.ndarray:
    """One classic RK4 step of length ``dt`` (default ``config.dt``) with the torque held."""
    s = np.asarray(s, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u_arr))):
        raise DomainError(f"non-finite state or torque: s={s}, u={u_arr}")
    u_c = clip_torque(params, u_arr)
    h = config.dt if dt is None else dt
    return np.array(_rk4_scalar(params, s.tolist(), u_c[0], u_c[1], h))


def step_rk4_batch(params: PlantParams, s, u, h: float, backend=np):
    """RK4 step for a batch of states with per-state actuated torques ``u``."""
    def f(x):
        acc = forward_dynamics_batch(params, x, u, backend)
        return backend.concatenate([x[..., 2:], acc], -1)

    k1 = f(s)
    k2 = f(s + 0.5 * h * k1)
    k3 = f(s + 0.5 * h * k2)
    k4 = f(s + h * k3)
    return s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_held(params: PlantParams, s, u: float, duration: float, dt: float) -> np.ndarray:
    """Integrate from ``s`` with actuated torque ``u`` held for ``duration``."""
    x = np.asarray(s, dtype=float).tolist()
    u_c = clip_torque(params, np.full(2, u))
    for _ in range(int(round(duration / dt))):
        x = _rk4_scalar(params, x, u_c[0], u_c[1], dt)
    return np.array(x)


def energy(params: PlantParams, s) -> float:
    """Total mechanical energy, zero potential at the pivot height."""
    q1, q2, v1, v2 = np.asarray(s, dtype=float)
    p = params
    h = p.m2 * p.l1 * p.r2
    m11 = p.I1 + p.I2 + p.m2 * p.l1**2 + 2.0 * h * math.cos(q2)
    m12 = p.I2 + h * math.cos(q2)
    kinetic = 0.5 * (m11 * v1 * v1 + 2.0 * m12 * v1 * v2 + p.I2 * v2 * v2)
    potential = -p.g * (
        (p.m1 * p.r1 + p.m2 * p.l1) * math.cos(q1) + p.m2 * p.r2 * math.cos(q1 + q2)
    )
    return kinetic + potential


@dataclass
class EpisodeLog:
    """One row per integrator step: time, state and the applied (clipped) torque.

    ``modes`` is filled by controllers that report which sub-controller
    produced each control tick (for example the hybrid swing-up/LQR
    controller); it is empty otherwise.
    """

    t: np.ndarray
    states: np.ndarray
    torques: np.ndarray
    control_dt: float
    dt: float
    modes: list[str] = field(default_factory=list)
    failure: str | None = None

    def __len__(self):
        return len(self.t)

    def control_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """States at each control tick (plus the final state) and the held torques."""
        k = int(round(self.control_dt / self.dt))
        states = self.states[::k]
        torques = self.torques[::k]
        n = len(torques)
        return states[:n], torques[:n]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
            for t, s, u in zip(self.t, self.states, self.torques):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in s] + [repr(float(v)) for v in u])

    @classmethod
    def from_csv(cls, path, control_dt: float, dt: float) -> "EpisodeLog":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != LOG_HEADER:
                raise ValueError(f"unexpected log header {header}")
            rows = np.array([[float(v) for v in row] for row in reader]).reshape(-1, 7)
        return cls(rows[:, 0], rows[:, 1:5], rows[:, 5:7], control_dt, dt)


Controller = Callable[[np.ndarray], float]


def episode(
    params: PlantParams,
    config: SimConfig,
    controller: Controller,
    x0=HANGING,
    torque_hook: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> EpisodeLog:
    """Run one mixed-rate episode.

    The controller is queried every control period with the current state
    and returns the actuated-joint torque (a scalar) or a 2-vector; the
    clipped torque is held for the intervening integrator steps. A
    non-finite torque aborts the episode; the partial log carries the
    diagnostic in ``failure``.

    ``torque_hook(tick, u)`` may modify the torque after the controller and
    before clipping (used for actuation perturbations).
    """
    n = config.n_steps
    k = config.substeps
    x = np.asarray(x0, dtype=float).tolist()
    if not all(math.isfinite(v) for v in x):
        raise DomainError(f"non-finite initial state {x}")
    t = np.zeros(n)
    states = np.zeros((n, 4))
    torques = np.zeros((n, 2))
    failure = None
    u_c = np.zeros(2)
    rows = 0
    for i in range(n):
        if i % k == 0:
            raw = controller(np.array(x))
            u = np.broadcast_to(np.asarray(raw, dtype=float), (2,)).copy()
            if np.ndim(raw) == 0:
                u = np.zeros(2)
                u[params.actuated] = float(raw)
            if torque_hook is not None:
                u = np.asarray(torque_hook(i // k, u), dtype=float)
            if not np.all(np.isfinite(u)):
                failure = f"controller returned non-finite torque {u} at t={i * config.dt:.4f}"
                break
            u_c = clip_torque(params, u)
        t[i] = i * config.dt
        states[i] = x
        torques[i] = u_c
        rows = i + 1
        x = _rk4_scalar(params, x, u_c[0], u_c[1], config.dt)
        if not all(math.isfinite(v) for v in x):
            failure = f"state diverged at t={(i + 1) * config.dt:.4f}"
            break
    modes = list(getattr(controller, "modes", []))
    return EpisodeLog(t[:rows], states[:rows], torques[:rows], config.control_dt, config.dt, modes, failure)
