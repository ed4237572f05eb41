"""Particle-based Monte Carlo policy gradient.

Particles start from ``N(0, eps I)`` and are pushed through the GP
one-step model with the reparameterisation ``Delta = mean + std * z``; the
same sampled ``Delta`` drives both the velocity and the position update.
The estimated cost is the particle-mean step cost summed over the horizon
and is differentiated by JAX reverse mode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np
import optax

from mcpilco import gpdyn, plant as plant_mod
from mcpilco.gpdyn import Dataset, GpModel, Predictor, SeKernelParams
from mcpilco.objective import CostConfig
from mcpilco.policy import DropoutMask, PolicyParams, init_policy, pre_squash, as_controller

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A particle left the guard region during a rollout."""


class NonFiniteGradientError(RuntimeError):
    pass


class OptimizationFailed(RuntimeError):
    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


@dataclass(frozen=True)
class OptimConfig:
    n_particles: int = 400
    horizon: float = 3.0
    control_dt: float = 1.0 / 50.0
    learning_rate: float = 0.01
    max_iters: int = 1000
    dropout_p: float = 0.25
    dropout_anneal: float = 0.75  # fraction of max_iters after which dropout is off
    dropout_centres: bool = True
    grad_clip: float = 20.0
    eps: float = 1e-4
    speed_guard: float = 50.0
    eval_every: int = 10
    early_stop_window: int = 30
    early_stop_rtol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1 or self.horizon_steps < 1 or self.eps <= 0:
            raise ValueError("need n_particles >= 1, horizon >= control_dt and eps > 0")

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / self.control_dt))

    def dropout_at(self, it: int) -> float:
        """Linearly annealed dropout probability, zero from ``dropout_anneal * max_iters`` on."""
        stop = self.dropout_anneal * self.max_iters
        if self.dropout_p == 0 or it >= stop:
            return 0.0
        return self.dropout_p * (1.0 - it / stop)


@dataclass
class ParticleBatch:
    """Simulated particles ``states`` (H+1, N, 4) and the draws ``z`` (H, N, 2) that produced them."""

    states: np.ndarray
    z: np.ndarray
    costs: np.ndarray  # (H+1,) particle-mean step costs


def sample_noise(key, cfg: OptimConfig):
    """Initial particles and per-step standard normal draws for one evaluation."""
    k0, kz = jax.random.split(key)
    x0 = math.sqrt(cfg.eps) * jax.random.normal(k0, (cfg.n_particles, 4))
    z = jax.random.normal(kz, (cfg.horizon_steps, cfg.n_particles, 2))
    return x0, z


def _safe_sqrt(v):
    pos = v > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, v, 1.0)), 0.0)


def _rollout(theta: PolicyParams, predictor: Predictor, x0, z, w_scale, A_scale, goal, ell_c):
    T_s = predictor.T_s

    def cost(x):
        d = x[..., :2] - goal
        return 1.0 - jnp.exp(-jnp.sum(d * d, -1) / ell_c)

    def body(x, z_t):
        u = theta.u_max * jnp.tanh(pre_squash(theta, x, w_scale, A_scale))
        mean, var = predictor(jnp.concatenate([x, u[:, None]], -1))
        delta = mean + _safe_sqrt(var) * z_t
        q, qd = x[:, :2], x[:, 2:]
        nxt = jnp.concatenate([q + T_s * qd + 0.5 * T_s * delta, qd + delta], -1)
        return nxt, (nxt, jnp.mean(cost(nxt)))

    _, (states, costs) = jax.lax.scan(body, x0, z)
    costs = jnp.concatenate([jnp.mean(cost(x0))[None], costs])
    states = jnp.concatenate([x0[None], states])
    return jnp.sum(costs), (states, costs)


def _j_only(theta, predictor, x0, z, w_scale, A_scale, goal, ell_c):
    J, (states, costs) = _rollout(theta, predictor, x0, z, w_scale, A_scale, goal, ell_c)
    return J, jnp.max(jnp.abs(states[..., 2:]))


_rollout_jit = jax.jit(_rollout)
_value_and_grad = jax.jit(jax.value_and_grad(_j_only, has_aux=True))


def _scales(theta: PolicyParams, mask: DropoutMask | None):
    if mask is None:
        return jnp.ones_like(theta.w), jnp.ones_like(theta.A)
    w_scale, A_scale = mask.scales()
    return w_scale, jnp.ones_like(theta.A) if A_scale is None else A_scale


def rollout_particles(
    predictor: Predictor,
    theta: PolicyParams,
    cost_cfg: CostConfig,
    x0,
    z,
    mask: DropoutMask | None = None,
    speed_guard: float = 50.0,
) -> tuple[ParticleBatch, float]:
    """Simulate particles for fixed draws and return them with the estimated cost.

    Raises :class:`DivergenceError` when any particle speed exceeds
    ``speed_guard``.
    """
    J, (states, costs) = _rollout_jit(
        theta, predictor, jnp.asarray(x0), jnp.asarray(z), *_scales(theta, mask),
        jnp.asarray(cost_cfg.goal), cost_cfg.ell_c,
    )
    states = np.asarray(states)
    peak = float(np.max(np.abs(states[..., 2:])))
    if not peak <= speed_guard:
        raise DivergenceError(f"particle speed {peak:.3g} rad/s exceeds guard {speed_guard}")
    return ParticleBatch(states, np.asarray(z), np.asarray(costs)), float(J)


def grad_J(
    predictor: Predictor,
    theta: PolicyParams,
    cost_cfg: CostConfig,
    x0,
    z,
    mask: DropoutMask | None = None,
    speed_guard: float = 50.0,
) -> tuple[float, PolicyParams]:
    """Estimated cost and its exact reverse-mode gradient at fixed draws and mask."""
    (J, peak), g = _value_and_grad(
        theta, predictor, jnp.asarray(x0), jnp.asarray(z), *_scales(theta, mask),
        jnp.asarray(cost_cfg.goal), cost_cfg.ell_c,
    )
    if not float(peak) <= speed_guard:
        raise DivergenceError(f"particle speed {float(peak):.3g} rad/s exceeds guard {speed_guard}")
    for name in ("w", "A", "F"):
        if not np.all(np.isfinite(np.asarray(getattr(g, name)))):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {name}")
    return float(J), g


def _make_step(optimizer, cost_cfg: CostConfig, cfg: OptimConfig, n_basis: int):
    goal = jnp.asarray(cost_cfg.goal)

    @jax.jit
    def step(theta, opt_state, predictor, key, p_drop):
        kn, km = jax.random.split(key)
        x0, z = sample_noise(kn, cfg)
        kw, ka = jax.random.split(km)
        scale = 1.0 / (1.0 - p_drop)
        w_scale = (jax.random.uniform(kw, (n_basis,)) >= p_drop) * scale
        if cfg.dropout_centres:
            A_scale = (jax.random.uniform(ka, theta.A.shape) >= p_drop) * scale
        else:
            A_scale = jnp.ones_like(theta.A)
        (J, peak), g = jax.value_and_grad(_j_only, has_aux=True)(
            theta, predictor, x0, z, w_scale, A_scale, goal, cost_cfg.ell_c
        )
        updates, new_state = optimizer.update(g, opt_state, theta)
        new_theta = optax.apply_updates(theta, updates)
        gnorm = optax.tree_utils.tree_norm(g)
        return new_theta, new_state, J, peak, gnorm

    @jax.jit
    def evaluate(theta, predictor, key):
        x0, z = sample_noise(key, cfg)
        J, peak = _j_only(theta, predictor, x0, z, jnp.ones_like(theta.w), jnp.ones_like(theta.A), goal, cost_cfg.ell_c)
        return J, peak

    return step, evaluate


@dataclass
class TrainingCurve:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, it, J, gnorm, p):
        self.rows.append((it, J, gnorm, p))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,J_hat,grad_norm,dropout_p\n")
            for it, J, g, p in self.rows:
                fh.write(f"{it},{J!r},{g!r},{p!r}\n")


def optimize_policy(
    predictor: Predictor,
    init: PolicyParams,
    cost_cfg: CostConfig,
    cfg: OptimConfig,
) -> tuple[PolicyParams, TrainingCurve]:
    """Adam on the particle cost with dropout annealing and early stopping.

    Returns the parameters with the lowest mask-free estimated cost seen at
    the periodic evaluations (fresh draws each time) and the per-iteration
    curve.
    """
    optimizer = optax.chain(optax.clip_by_global_norm(cfg.grad_clip), optax.adam(cfg.learning_rate))
    step, evaluate = _make_step(optimizer, cost_cfg, cfg, init.n_basis)
    theta = init
    opt_state = optimizer.init(theta)
    base = jax.random.PRNGKey(cfg.seed)
    curve = TrainingCurve()
    best_theta, best_J = init, math.inf
    diverged = 0
    history: list[float] = []

    def check(it, theta):
        nonlocal best_theta, best_J
        J, peak = evaluate(theta, predictor, jax.random.fold_in(jax.random.fold_in(base, 1), it))
        J = float(J)
        if float(peak) <= cfg.speed_guard and J < best_J:
            best_theta, best_J = theta, J

    for it in range(cfg.max_iters):
        if it % cfg.eval_every == 0:
            check(it, theta)
        p = cfg.dropout_at(it)
        key = jax.random.fold_in(jax.random.fold_in(base, 0), it)
        new_theta, new_state, J, peak, gnorm = step(theta, opt_state, predictor, key, p)
        J, gnorm = float(J), float(gnorm)
        if not (float(peak) <= cfg.speed_guard and math.isfinite(gnorm)):
            diverged += 1
            curve.append(it, math.nan, math.nan, p)
            continue
        theta, opt_state = new_theta, new_state
        curve.append(it, J, gnorm, p)
        history.append(J)
        w = cfg.early_stop_window
        if p == 0.0 and len(history) >= 2 * w and it >= cfg.dropout_anneal * cfg.max_iters + w:
            old, new = np.mean(history[-2 * w : -w]), np.mean(history[-w:])
            if (old - new) < cfg.early_stop_rtol * abs(old):
                log.info("early stop at iteration %d (J=%.4f)", it, J)
                break
    if diverged == cfg.max_iters:
        raise OptimizationFailed("every optimisation step diverged", curve)
    check(cfg.max_iters, theta)
    return best_theta, curve


@dataclass(frozen=True)
class TrialConfig:
    n_trials: int = 6
    n_basis: int = 200
    u_max_fraction: float = 0.25
    explore_duration: float = 3.0
    n_inducing: int | None = 400
    gp_max_iter: int = 200
    gp_max_fit_points: int = 1500
    seed: int = 0


@dataclass
class TrialResult:
    model: GpModel
    policy: PolicyParams | None
    logs: list
    curves: list
    datasets: list = field(default_factory=list)
    stopped_early: bool = False


def exploration_controller(u_max: float, seed: int):
    """Uniform random torque in ``[-u_max, u_max]``, redrawn every control tick."""
    rng = np.random.default_rng(seed)

    def controller(x):
        return float(rng.uniform(-u_max, u_max))

    return controller


def run_trials(
    plant: plant_mod.PlantParams,
    sim: plant_mod.SimConfig,
    cost_cfg: CostConfig,
    optim: OptimConfig,
    trials: TrialConfig,
    stop_when=None,
    on_trial=None,
) -> TrialResult:
    """The model-learning / policy-update / execution loop.

    Trial 1 executes the random exploration policy and fits the model.
    Each later trial refits the GP on all data, optimises the policy
    (warm-started from the previous one) and executes it on the plant for
    the optimisation horizon. ``stop_when(policy, model)`` may end the loop
    early; ``on_trial(index, result)`` observes progress.
    """
    if trials.n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    u_max = trials.u_max_fraction * plant.torque_limit
    explore_sim = replace(sim, horizon=trials.explore_duration)
    exec_sim = replace(sim, horizon=optim.horizon)
    first = plant_mod.episode(plant, explore_sim, exploration_controller(u_max, trials.seed))
    data = Dataset.from_log(first, plant.actuated)
    logs, curves, datasets = [first], [], [data]
    model = gpdyn.fit_model(data, plant, sim.control_dt, trials.n_inducing, max_iter=trials.gp_max_iter,
                            max_fit_points=trials.gp_max_fit_points)
    result = TrialResult(model, None, logs, curves, datasets)
    if on_trial is not None:
        on_trial(1, result)
    policy = init_policy(trials.seed, trials.n_basis, u_max)
    for k in range(2, trials.n_trials + 1):
        cfg = replace(optim, seed=optim.seed + 1000 * k)
        policy, curve = optimize_policy(model.predictor(), policy, cost_cfg, cfg)
        curves.append(curve)
        run = plant_mod.episode(plant, exec_sim, as_controller(policy))
        logs.append(run)
        new = Dataset.from_log(run, plant.actuated)
        datasets.append(new)
        data = data.extend(new)
        result.policy = policy
        if on_trial is not None:
            on_trial(k, result)
        if stop_when is not None and stop_when(policy, model):
            result.stopped_early = True
            break
        if k < trials.n_trials:
            model = gpdyn.fit_model(data, plant, sim.control_dt, trials.n_inducing, init=model.kernels,
                                    max_iter=trials.gp_max_iter, max_fit_points=trials.gp_max_fit_points)
            result.model = model
    if len(result.model.data) != len(data):
        result.model = gpdyn.fit_model(data, plant, sim.control_dt, trials.n_inducing, init=result.model.kernels,
                                       max_iter=trials.gp_max_iter, max_fit_points=trials.gp_max_fit_points)
    return result
