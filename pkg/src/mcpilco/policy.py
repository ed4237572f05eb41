"""Squashed radial-basis-function policy.

    u(x) = u_M * tanh( sum_i (w_i / u_M) * exp(-(a_i - phi(x))^T S (a_i - phi(x))) )

with ``phi(x) = [qd1, qd2, cos q1, cos q2, sin q1, sin q2]`` and shape
matrix ``S = F F^T``, kept positive semi-definite through its square factor
``F``. Parameters are a JAX pytree so the policy can be differentiated and
jitted inside particle rollouts.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

FEATURE_DIM = 6
CHECKPOINT_VERSION = 1


def features(x):
    """Map states ``(..., 4)`` to policy features ``(..., 6)``."""
    q = x[..., :2]
    return jnp.concatenate([x[..., 2:4], jnp.cos(q), jnp.sin(q)], -1)


@functools.partial(jax.tree_util.register_dataclass, data_fields=["w", "A", "F"], meta_fields=["u_max"])
@dataclass(frozen=True)
class PolicyParams:
    """Weights ``w`` (N_b,), centres ``A`` (N_b, 6), shape factor ``F`` (6, 6) and squash limit."""

    w: jax.Array
    A: jax.Array
    F: jax.Array
    u_max: float

    @property
    def n_basis(self) -> int:
        return self.w.shape[0]

    @property
    def shape_matrix(self):
        return self.F @ self.F.T

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(t).ravel() for t in (self.w, self.A, self.F)])

    @classmethod
    def from_flat(cls, theta, n_basis: int, u_max: float) -> "PolicyParams":
        theta = jnp.asarray(theta, dtype=jnp.float64)
        nw, na = n_basis, n_basis * FEATURE_DIM
        return cls(
            theta[:nw],
            theta[nw : nw + na].reshape(n_basis, FEATURE_DIM),
            theta[nw + na :].reshape(FEATURE_DIM, FEATURE_DIM),
            u_max,
        )

    def save(self, path, **extra) -> None:
        np.savez(
            path,
            version=CHECKPOINT_VERSION,
            w=np.asarray(self.w),
            A=np.asarray(self.A),
            F=np.asarray(self.F),
            u_max=self.u_max,
            **extra,
        )

    @classmethod
    def load(cls, path) -> tuple["PolicyParams", dict]:
        """Load a policy checkpoint; returns the params and any extra arrays stored with it."""
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported policy checkpoint version {version}")
            params = cls(jnp.asarray(data["w"]), jnp.asarray(data["A"]), jnp.asarray(data["F"]), float(data["u_max"]))
            extra = {k: data[k] for k in data.files if k not in ("version", "w", "A", "F", "u_max")}
        return params, extra


@dataclass(frozen=True)
class DropoutMask:
    """Keep indicators for the weights and, optionally, the centres.

    Kept entries are rescaled by ``1 / (1 - p)``, which leaves the expected
    pre-squash sum unchanged when only weights are dropped.
    """

    keep_w: jax.Array
    keep_A: jax.Array | None
    p: float

    @classmethod
    def sample(cls, key, n_basis: int, p: float, centres: bool = True) -> "DropoutMask":
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        kw, ka = jax.random.split(key)
        keep_w = (jax.random.uniform(kw, (n_basis,)) >= p).astype(jnp.float64)
        keep_A = None
        if centres:
            keep_A = (jax.random.uniform(ka, (n_basis, FEATURE_DIM)) >= p).astype(jnp.float64)
        return cls(keep_w, keep_A, p)

    def scales(self):
        """Multipliers for ``w`` and ``A`` (the latter ``None`` when centres are untouched)."""
        s = 1.0 / (1.0 - self.p)
        return self.keep_w * s, None if self.keep_A is None else self.keep_A * s


def init_policy(seed: int, n_basis: int, u_max: float, max_speed: float = 2.0 * math.pi) -> PolicyParams:
    """Random initial policy.

    Weights are uniform in ``[-u_max, u_max]``. Centres are uniform in the
    image of the feature map: velocities uniform in ``[-max_speed, max_speed]``
    and angles uniform on the circle before the cos/sin map. The shape factor
    starts at the identity.
    """
    if n_basis < 1:
        raise ValueError("n_basis must be >= 1")
    kw, ks, ka = jax.random.split(jax.random.PRNGKey(int(seed)), 3)
    w = jax.random.uniform(kw, (n_basis,), minval=-u_max, maxval=u_max, dtype=jnp.float64)
    speeds = jax.random.uniform(ks, (n_basis, 2), minval=-max_speed, maxval=max_speed, dtype=jnp.float64)
    angles = jax.random.uniform(ka, (n_basis, 2), minval=-math.pi, maxval=math.pi, dtype=jnp.float64)
    A = jnp.concatenate([speeds, jnp.cos(angles), jnp.sin(angles)], -1)
    return PolicyParams(w, A, jnp.eye(FEATURE_DIM), float(u_max))


def pre_squash(params: PolicyParams, x, w_scale=None, A_scale=None):
    """Weighted basis sum inside the tanh, for states ``(..., 4)``.

    ``w_scale``/``A_scale`` are the dropout multipliers from
    :meth:`DropoutMask.scales`.
    """
    w = params.w if w_scale is None else params.w * w_scale
    A = params.A if A_scale is None else params.A * A_scale
    g, h = features(x) @ params.F, A @ params.F
    d = jnp.sum(g * g, -1)[..., None] + jnp.sum(h * h, -1) - 2.0 * g @ h.T
    return jnp.exp(-jnp.maximum(d, 0.0)) @ w / params.u_max


def evaluate(params: PolicyParams, x, mask: DropoutMask | None = None):
    """Torque on the actuated joint, inside ``(-u_max, u_max)``."""
    scales = (None, None) if mask is None else mask.scales()
    return params.u_max * jnp.tanh(pre_squash(params, x, *scales))


_evaluate_jit = jax.jit(evaluate)


def as_controller(params: PolicyParams):
    """Deterministic numpy ``state -> torque`` callable for the plant simulator."""
    w, A, F = (np.asarray(t) for t in (params.w, params.A, params.F))
    u_max = params.u_max

    def controller(x) -> float:
        x = np.asarray(x, dtype=float)
        phi = np.array([x[2], x[3], math.cos(x[0]), math.cos(x[1]), math.sin(x[0]), math.sin(x[1])])
        proj = (phi - A) @ F
        return u_max * math.tanh(float(np.exp(-np.einsum("ij,ij->i", proj, proj)) @ w) / u_max)

    return controller
