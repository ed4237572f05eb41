"""LQR stabilisation of the upright equilibrium and the swing-up hand-off.

The LQR is designed on the control-period discretisation of the plant (RK4
substeps with the torque held), so it matches the 50 Hz zero-order-hold
loop it runs in. Angle errors are wrapped to ``(-pi, pi]`` before the gain
and the region-of-attraction test, so ``q1 = -pi`` counts as upright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from mcpilco.plant import UPRIGHT, PlantParams, SimConfig, simulate_held, step_rk4_batch


class LqrError(RuntimeError):
    pass


def wrap_error(x, x_eq) -> np.ndarray:
    """State error with the two angle components wrapped to ``(-pi, pi]``."""
    e = np.asarray(x, dtype=float) - np.asarray(x_eq, dtype=float)
    e[..., :2] = -((-e[..., :2] + math.pi) % (2 * math.pi) - math.pi)
    return e


def linearize(params: PlantParams, x_eq, T_s: float, dt: float = 1.0 / 500.0, h: float = 1e-5, tol: float = 1e-9):
    """Central-difference Jacobians ``(A, B)`` of the held-torque ``T_s`` map.

    ``B`` has one column per joint torque; the unactuated column is zero.
    """
    x_eq = np.asarray(x_eq, dtype=float)
    drift = np.linalg.norm(simulate_held(params, x_eq, 0.0, T_s, dt) - x_eq)
    if drift > tol:
        raise LqrError(f"{x_eq} is not an equilibrium (one-step drift {drift:.3g})")
    A = np.zeros((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        A[:, j] = (simulate_held(params, x_eq + e, 0.0, T_s, dt) - simulate_held(params, x_eq - e, 0.0, T_s, dt)) / (2 * h)
    B = np.zeros((4, 2))
    j = params.actuated
    B[:, j] = (simulate_held(params, x_eq, h, T_s, dt) - simulate_held(params, x_eq, -h, T_s, dt)) / (2 * h)
    return A, B


def riccati_residual(A, B, Q, R, S, relative: bool = False) -> float:
    """Max abs entry of the Riccati equation residual, optionally divided by max abs entry of ``S``."""
    G = R + B.T @ S @ B
    res = np.max(np.abs(A.T @ S @ A - A.T @ S @ B @ np.linalg.solve(G, B.T @ S @ A) + Q - S))
    return float(res / max(np.max(np.abs(S)), 1e-300) if relative else res)


def solve_lqr(A, B, Q, R, tol: float = 1e-8, max_iter: int = 100_000, patience: int = 200):
    """Discrete-time LQR gain ``K`` and Riccati solution ``S``.

    Starts from the Schur-method solution and polishes it by fixed-point
    iteration until the residual is below ``tol``. When the iteration
    stalls at rounding level first, the relative residual must meet ``tol``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    try:
        S = scipy.linalg.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError):
        S = Q.copy()
    best, best_S, since = math.inf, S, 0
    for _ in range(max_iter):
        res = riccati_residual(A, B, Q, R, S)
        if res < best:
            best, best_S, since = res, S, 0
        else:
            since += 1
        if res <= tol or since >= patience:
            break
        G = R + B.T @ S @ B
        S_new = Q + A.T @ S @ A - A.T @ S @ B @ np.linalg.solve(G, B.T @ S @ A)
        S = 0.5 * (S_new + S_new.T)
        if not np.all(np.isfinite(S)):
            raise LqrError("Riccati iteration diverged")
    S = best_S
    if best > tol and riccati_residual(A, B, Q, R, S, relative=True) > tol:
        raise LqrError(f"Riccati iteration did not converge (residual {best:.3g})")
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    return K, S


@dataclass
class LqrDesign:
    """Gain, Riccati solution and region-of-attraction level for one robot."""

    x_eq: np.ndarray
    A: np.ndarray
    B: np.ndarray  # (4, 1), actuated column
    Q: np.ndarray
    R: np.ndarray
    K: np.ndarray  # (1, 4)
    S: np.ndarray
    rho: float
    actuated: int
    T_s: float
    torque_limit: float

    def value(self, x) -> np.ndarray:
        e = wrap_error(x, self.x_eq)
        return np.einsum("...i,ij,...j->...", e, self.S, e)

    def torque(self, x):
        """Clipped LQR torque on the actuated joint."""
        u = -(wrap_error(x, self.x_eq) @ self.K.T)[..., 0]
        return np.clip(u, -self.torque_limit, self.torque_limit)

    def to_arrays(self, prefix: str = "lqr_") -> dict:
        keys = ("x_eq", "A", "B", "Q", "R", "K", "S", "rho", "actuated", "T_s", "torque_limit")
        return {prefix + k: np.asarray(getattr(self, k)) for k in keys}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "lqr_") -> "LqrDesign":
        get = lambda k: np.asarray(arrays[prefix + k])
        return cls(
            get("x_eq"), get("A"), get("B"), get("Q"), get("R"), get("K"), get("S"),
            float(get("rho")), int(get("actuated")), float(get("T_s")), float(get("torque_limit")),
        )


def in_roa(design: LqrDesign, x) -> bool:
    return bool(design.value(x) < design.rho)


def closed_loop_converges(
    params: PlantParams,
    design: LqrDesign,
    starts: np.ndarray,
    duration: float = 5.0,
    dt: float = 1.0 / 500.0,
    q_tol: float = 1e-3,
    qd_tol: float = 1e-2,
    return_final: bool = False,
):
    """Simulate LQR from a batch of states on the nonlinear plant; flag those ending at upright."""
    x = np.array(starts, dtype=float)
    k = int(round(design.T_s / dt))
    u = np.zeros(len(x))
    for i in range(int(round(duration / dt))):
        if i % k == 0:
            u = design.torque(x)
        with np.errstate(all="ignore"):
            x = step_rk4_batch(params, x, u, dt)
    e = wrap_error(x, design.x_eq)
    with np.errstate(invalid="ignore"):
        ok = np.all(np.abs(e[:, :2]) < q_tol, 1) & np.all(np.abs(e[:, 2:]) < qd_tol, 1)
    return (ok, x) if return_final else ok


def ellipsoid_samples(S: np.ndarray, rho: float, n: int, rng: np.random.Generator, inside: bool = False) -> np.ndarray:
    """Points with ``e^T S e = rho`` (or uniformly inside the ellipsoid when ``inside``)."""
    d = rng.standard_normal((n, S.shape[0]))
    d /= np.sqrt(np.einsum("ni,ij,nj->n", d, S, d))[:, None]
    if inside:
        d *= rng.uniform(0, 1, (n, 1)) ** (1.0 / S.shape[0])
    return d * math.sqrt(rho)


def calibrate_rho(
    params: PlantParams,
    design: LqrDesign,
    n_samples: int = 64,
    seed: int = 0,
    iterations: int = 14,
    duration: float = 5.0,
    dt: float = 1.0 / 500.0,
) -> float:
    """Largest tested level whose boundary samples all converge.

    Geometric bisection between ``hi`` (half the level of the hanging state)
    and ``hi * 1e-8``; the same sample directions are reused at every level.
    """
    rng = np.random.default_rng(seed)
    unit = ellipsoid_samples(design.S, 1.0, n_samples, rng)
    hanging = np.zeros(4)
    hi = 0.5 * float(design.value(hanging))

    def ok(rho):
        return bool(np.all(closed_loop_converges(params, design, design.x_eq + unit * math.sqrt(rho), duration, dt)))

    if ok(hi):
        return hi
    lo = hi * 1e-8
    if not ok(lo):
        raise LqrError("LQR fails even on a tiny neighbourhood of the equilibrium")
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def design_lqr(
    params: PlantParams,
    sim: SimConfig,
    Q=(10.0, 10.0, 1.0, 1.0),
    R: float = 1.0,
    calibrate: bool = True,
    n_samples: int = 64,
    seed: int = 0,
) -> LqrDesign:
    """Linearise at upright, solve the Riccati equation and calibrate the RoA level."""
    A, B2 = linearize(params, UPRIGHT, sim.control_dt, sim.dt)
    j = params.actuated
    B = B2[:, [j]]
    Qm = np.diag(np.asarray(Q, dtype=float))
    Rm = np.atleast_2d(float(R))
    K, S = solve_lqr(A, B, Qm, Rm)
    design = LqrDesign(UPRIGHT.copy(), A, B, Qm, Rm, K, S, math.inf, j, sim.control_dt, params.torque_limit)
    if calibrate:
        design.rho = calibrate_rho(params, design, n_samples=n_samples, seed=seed, dt=sim.dt)
    return design


@dataclass
class HybridController:
    """Swing-up policy until the state first enters the RoA, then LQR for good."""

    policy: object
    design: LqrDesign
    latched: bool = False
    modes: list[str] = field(default_factory=list)

    def __call__(self, x) -> float:
        if not self.latched and in_roa(self.design, x):
            self.latched = True
        self.modes.append("lqr" if self.latched else "policy")
        if self.latched:
            return float(self.design.torque(x))
        return float(self.policy(x))

    def reset(self) -> None:
        self.latched = False
        self.modes = []


def hybrid_controller(policy, design: LqrDesign) -> HybridController:
    return HybridController(policy, design)
