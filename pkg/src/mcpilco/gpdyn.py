"""GP model of the per-joint velocity change with a physics prior mean.

Each joint's one-step velocity change ``Delta`` is an independent GP over
the input ``x~ = [q1, q2, qd1, qd2, u]`` (``u`` is the torque on the
actuated joint). The prior mean is the Euler step of the nominal dynamics,
``T_s * M(q)^-1 (B u - n(q, qd))``, so the GP only learns the residual.
Next states follow the speed-integration update

    qd' = qd + Delta
    q'  = q + T_s * qd + (T_s / 2) * Delta

All posterior computations are JAX and may be differentiated w.r.t. the
query input.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize

from mcpilco.plant import DomainError, EpisodeLog, PlantParams, forward_dynamics_batch

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)

INPUT_DIM = 5
JITTER = 1e-8
CHECKPOINT_VERSION = 1


class FitError(RuntimeError):
    """Raised when the kernel matrix cannot be factorised even with jitter."""


@dataclass(frozen=True)
class SeKernelParams:
    """Squared-exponential kernel ``lam^2 exp(-sum_j (a_j - b_j)^2 / Lambda_j)`` plus noise."""

    lam: float
    Lambda: np.ndarray
    noise_var: float

    def __post_init__(self):
        Lambda = np.asarray(self.Lambda, dtype=float)
        object.__setattr__(self, "Lambda", Lambda)
        if not (self.lam > 0 and self.noise_var > 0 and np.all(Lambda > 0)):
            raise ValueError(f"kernel hyperparameters must be positive: {self}")

    def to_log(self) -> np.ndarray:
        return np.concatenate([[np.log(self.lam)], np.log(self.Lambda), [np.log(self.noise_var)]])

    @classmethod
    def from_log(cls, v) -> "SeKernelParams":
        v = np.asarray(v, dtype=float)
        return cls(float(np.exp(v[0])), np.exp(v[1:-1]), float(np.exp(v[-1])))

    def to_dict(self) -> dict:
        return {"lam": self.lam, "Lambda": self.Lambda.tolist(), "noise_var": self.noise_var}

    @classmethod
    def from_dict(cls, d) -> "SeKernelParams":
        return cls(float(d["lam"]), np.asarray(d["Lambda"], dtype=float), float(d["noise_var"]))


def _sq_dist(A, B, Lambda):
    # expanded form runs as a matmul; clamp the cancellation error at zero
    a, b = A / jnp.sqrt(Lambda), B / jnp.sqrt(Lambda)
    d = jnp.sum(a * a, -1)[..., None] + jnp.sum(b * b, -1) - 2.0 * a @ b.T
    return jnp.maximum(d, 0.0)


def _kernel_matrix(A, B, lam, Lambda):
    d = (A[:, None, :] - B[None, :, :]) ** 2 / Lambda
    return lam**2 * jnp.exp(-jnp.sum(d, -1))


def se_kernel(a, b, p: SeKernelParams) -> float:
    """Covariance between two GP inputs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.shape != p.Lambda.shape:
        raise ValueError(f"dimension mismatch: {a.shape}, {b.shape}, Lambda {p.Lambda.shape}")
    return float(p.lam**2 * np.exp(-np.sum((a - b) ** 2 / p.Lambda)))


def kernel_matrix(A, B, p: SeKernelParams) -> np.ndarray:
    return np.asarray(_kernel_matrix(jnp.asarray(A), jnp.asarray(B), p.lam, jnp.asarray(p.Lambda)))


def prior_mean(params: PlantParams, T_s: float, x):
    """Nominal-model velocity change ``T_s * qdd`` for inputs ``(..., 5)``.

    Returns a ``(..., 2)`` array; JAX inputs stay JAX (differentiable).
    """
    is_jax = isinstance(x, jax.Array)
    backend = jnp if is_jax else np
    x = backend.asarray(x, dtype=backend.float64)
    if not is_jax and not np.all(np.isfinite(x)):
        raise DomainError(f"non-finite GP input {x}")
    return T_s * forward_dynamics_batch(params, x[..., :4], x[..., 4], backend)


@dataclass
class Dataset:
    """GP inputs ``X`` (n, 5) and velocity-change targets ``Y`` (n, 2)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, INPUT_DIM)
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1, 2)
        if len(self.X) != len(self.Y):
            raise ValueError(f"inputs ({len(self.X)}) and targets ({len(self.Y)}) differ in length")

    def __len__(self):
        return len(self.X)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, INPUT_DIM)), np.zeros((0, 2)))

    @classmethod
    def from_log(cls, log_: EpisodeLog, actuated: int) -> "Dataset":
        """Control-rate samples from an episode log.

        Inputs are the state at each control tick with the torque held over
        the following tick; targets are ``qd[t+1] - qd[t]``.
        """
        k = int(round(log_.control_dt / log_.dt))
        states = log_.states[::k]
        torques = log_.torques[::k, actuated]
        n = len(states) - 1
        if n < 1:
            return cls.empty()
        X = np.column_stack([states[:n], torques[:n]])
        Y = states[1 : n + 1, 2:] - states[:n, 2:]
        return cls(X, Y)

    def extend(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.X, other.X]), np.vstack([self.Y, other.Y]))


def farthest_point_subset(X: np.ndarray, m: int, Lambda: np.ndarray) -> np.ndarray:
    """Greedy farthest-point indices in the ``Lambda``-scaled metric.

    Starts from the first point; ties resolve to the lowest index so the
    selection is deterministic.
    """
    n = len(X)
    if m <= 0:
        raise ValueError("need at least one inducing point")
    if m >= n:
        return np.arange(n)
    Z = X / np.sqrt(Lambda)
    chosen = [0]
    dist = np.sum((Z - Z[0]) ** 2, 1)
    for _ in range(m - 1):
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, np.sum((Z - Z[i]) ** 2, 1))
    return np.sort(np.array(chosen))


def _cholesky_with_jitter(S: np.ndarray, what: str, tries: int = 6) -> np.ndarray:
    """Cholesky factor, adding growing diagonal jitter only if plain factorisation fails."""
    if not np.all(np.isfinite(S)):
        raise FitError(f"{what} has non-finite entries")
    scale = float(np.mean(np.diag(S)))
    for k in range(tries):
        try:
            return np.linalg.cholesky(S if k == 0 else S + JITTER * 10 ** (k - 1) * scale * np.eye(len(S)))
        except np.linalg.LinAlgError:
            continue
    raise FitError(f"{what} is not positive definite even with jitter")


def _neg_log_ml(logp, X, r):
    lam = jnp.exp(logp[0])
    Lambda = jnp.exp(logp[1:-1])
    noise = jnp.exp(logp[-1])
    n = X.shape[0]
    K = _kernel_matrix(X, X, lam, Lambda) + (noise + JITTER * lam**2) * jnp.eye(n)
    L = jnp.linalg.cholesky(K)
    alpha = jax.scipy.linalg.cho_solve((L, True), r)
    return 0.5 * r @ alpha + jnp.sum(jnp.log(jnp.diag(L))) + 0.5 * n * jnp.log(2 * jnp.pi)


_nlml_and_grad = jax.jit(jax.value_and_grad(_neg_log_ml))


def log_marginal_likelihood(X, r, p: SeKernelParams) -> float:
    """Log marginal likelihood of residual targets ``r`` under a zero-mean GP."""
    value = float(_nlml_and_grad(jnp.asarray(p.to_log()), jnp.asarray(X), jnp.asarray(r))[0])
    return -value


def fit_hyperparams(
    X,
    r,
    init: SeKernelParams,
    max_iter: int = 200,
    rtol: float = 1e-6,
    log_bounds: tuple[float, float] = (-12.0, 12.0),
) -> SeKernelParams:
    """Maximise the log marginal likelihood over log-hyperparameters.

    Uses L-BFGS-B on ``-log ML`` with JAX gradients. The result is only
    accepted if it does not lower the likelihood of ``init``.
    """
    X = jnp.asarray(X, dtype=jnp.float64)
    r = jnp.asarray(r, dtype=jnp.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples to fit hyperparameters")

    def fun(v):
        value, grad = _nlml_and_grad(jnp.asarray(v), X, r)
        value = float(value)
        if not np.isfinite(value):
            return 1e300, np.zeros_like(v)
        return value, np.asarray(grad)

    x0 = init.to_log()
    f0, _ = fun(x0)
    if f0 >= 1e300:
        raise FitError("kernel matrix is singular at the initial hyperparameters")
    res = scipy.optimize.minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[log_bounds] * len(x0),
        options={"maxiter": max_iter, "ftol": rtol},
    )
    if res.fun <= f0 and np.all(np.isfinite(res.x)):
        return SeKernelParams.from_log(res.x)
    return init


def default_init(X: np.ndarray, r: np.ndarray) -> SeKernelParams:
    """Data-scaled starting hyperparameters."""
    spread = np.var(X, axis=0)
    spread = np.where(spread > 1e-8, spread, 1.0)
    sd = float(np.std(r)) if len(r) > 1 else 1.0
    sd = sd if sd > 1e-8 else 1e-3
    return SeKernelParams(sd, 4.0 * spread, (0.1 * sd) ** 2)


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["Z", "alpha", "var_mat", "lam", "Lambda", "noise_var"],
    meta_fields=["plant", "T_s", "sparse"],
)
@dataclass(frozen=True)
class Predictor:
    """Precomputed per-joint quantities for fast posterior queries.

    For the exact GP ``Z`` is the full training set, ``alpha = Gamma^-1 r``
    and ``var_mat = Gamma^-1``. For Subset of Regressors ``Z`` is the
    inducing set, ``alpha = S^-1 K_uf r`` and ``var_mat = noise * S^-1`` with
    ``S = noise * K_uu + K_uf K_fu``. Either way

        mean = m(x) + k(x, Z) alpha,   var = lam^2 - k Gamma^-1 k  (exact)
                                       var = k var_mat k            (SoR)
    """

    Z: jax.Array  # (m, 5)
    alpha: jax.Array  # (2, m)
    var_mat: jax.Array  # (2, m, m)
    lam: jax.Array  # (2,)
    Lambda: jax.Array  # (2, 5)
    noise_var: jax.Array  # (2,)
    plant: PlantParams | None
    T_s: float
    sparse: bool

    def __call__(self, x):
        """Posterior mean and variance ``(..., 2)`` for inputs ``(..., 5)``."""
        mean = jnp.zeros(x.shape[:-1] + (2,)) if self.plant is None else prior_mean(self.plant, self.T_s, x)
        if self.Z.shape[0] == 0:
            return mean, jnp.broadcast_to(self.lam**2, mean.shape)
        means, variances = [], []
        for i in range(2):
            k = self.lam[i] ** 2 * jnp.exp(-_sq_dist(x, self.Z, self.Lambda[i]))  # (..., m)
            means.append(k @ self.alpha[i])
            quad = jnp.sum((k @ self.var_mat[i]) * k, -1)
            variances.append(quad if self.sparse else self.lam[i] ** 2 - quad)
        var = jnp.maximum(jnp.stack(variances, -1), 0.0)
        return mean + jnp.stack(means, -1), var


@dataclass
class GpModel:
    """Two independent GPs for the joint velocity changes.

    ``plant`` supplies the prior mean (``None`` for a zero mean). ``inducing``
    holds indices into the dataset for the Subset of Regressors
    approximation; ``None`` means the exact GP.
    """

    kernels: list[SeKernelParams]
    data: Dataset = field(default_factory=Dataset.empty)
    plant: PlantParams | None = None
    T_s: float = 1.0 / 50.0
    inducing: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def residuals(self) -> np.ndarray:
        if self.plant is None or len(self.data) == 0:
            return self.data.Y.copy()
        return self.data.Y - prior_mean(self.plant, self.T_s, self.data.X)

    def _stacked_hyper(self):
        return (
            jnp.asarray([k.lam for k in self.kernels]),
            jnp.asarray(np.stack([k.Lambda for k in self.kernels])),
            jnp.asarray([k.noise_var for k in self.kernels]),
        )

    def exact_predictor(self) -> Predictor:
        if "exact" not in self._cache:
            X = self.data.X
            r = self.residuals()
            lam, Lambda, noise = self._stacked_hyper()
            n = len(X)
            alpha = np.zeros((2, n))
            inv = np.zeros((2, n, n))
            for i, kp in enumerate(self.kernels):
                if n == 0:
                    break
                G = kernel_matrix(X, X, kp) + (kp.noise_var + JITTER * kp.lam**2) * np.eye(n)
                L = _cholesky_with_jitter(G, f"Gamma for joint {i}")
                alpha[i] = scipy.linalg.cho_solve((L, True), r[:, i])
                inv[i] = scipy.linalg.cho_solve((L, True), np.eye(n))
            self._cache["exact"] = Predictor(
                jnp.asarray(X), jnp.asarray(alpha), jnp.asarray(inv), lam, Lambda, noise, self.plant, self.T_s, False
            )
        return self._cache["exact"]

    def sor_predictor(self) -> Predictor:
        if self.inducing is None:
            raise ValueError("model has no inducing set")
        if len(self.inducing) == 0:
            raise ValueError("Subset of Regressors needs at least one inducing point")
        if "sor" not in self._cache:
            X = self.data.X
            U = X[self.inducing]
            r = self.residuals()
            lam, Lambda, noise = self._stacked_hyper()
            m = len(U)
            alpha = np.zeros((2, m))
            var_mat = np.zeros((2, m, m))
            for i, kp in enumerate(self.kernels):
                s2 = kp.noise_var + JITTER * kp.lam**2
                Kuu = kernel_matrix(U, U, kp)
                Kuf = kernel_matrix(U, X, kp)
                S = s2 * Kuu + Kuf @ Kuf.T
                L = _cholesky_with_jitter(S, f"SoR system for joint {i}")
                alpha[i] = scipy.linalg.cho_solve((L, True), Kuf @ r[:, i])
                var_mat[i] = s2 * scipy.linalg.cho_solve((L, True), np.eye(m))
            self._cache["sor"] = Predictor(
                jnp.asarray(U), jnp.asarray(alpha), jnp.asarray(var_mat), lam, Lambda, noise, self.plant, self.T_s, True
            )
        return self._cache["sor"]

    def predictor(self) -> Predictor:
        """SoR predictor when an inducing set is configured, exact otherwise."""
        return self.sor_predictor() if self.inducing is not None else self.exact_predictor()

    def posterior(self, x):
        """Exact per-joint posterior ``(mean, var)`` at inputs ``(..., 5)``."""
        mean, var = self.exact_predictor()(jnp.asarray(x, dtype=jnp.float64))
        return np.asarray(mean), np.asarray(var)

    def posterior_sor(self, x):
        mean, var = self.sor_predictor()(jnp.asarray(x, dtype=jnp.float64))
        return np.asarray(mean), np.asarray(var)

    def predict_next_state(self, x, u):
        """Gaussian over the next state: mean ``(..., 4)`` and diagonal variance ``(..., 4)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        xt = np.concatenate([x, u[..., None]], -1)
        mean, var = self.predictor()(jnp.asarray(xt))
        mu, var = next_state_moments(x, np.asarray(mean), np.asarray(var), self.T_s)
        return np.asarray(mu), np.asarray(var)

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "T_s": self.T_s,
            "kernels": [k.to_dict() for k in self.kernels],
            "plant": None if self.plant is None else self.plant.__dict__,
        }
        np.savez(
            path,
            meta=json.dumps(meta, sort_keys=True),
            X=self.data.X,
            Y=self.data.Y,
            inducing=np.array([], dtype=np.int64) if self.inducing is None else np.asarray(self.inducing, dtype=np.int64),
            has_inducing=self.inducing is not None,
        )

    @classmethod
    def load(cls, path) -> "GpModel":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported model checkpoint version {meta['version']}")
            plant = None if meta["plant"] is None else PlantParams(**meta["plant"])
            inducing = data["inducing"] if bool(data["has_inducing"]) else None
            return cls(
                [SeKernelParams.from_dict(k) for k in meta["kernels"]],
                Dataset(data["X"], data["Y"]),
                plant,
                float(meta["T_s"]),
                inducing,
            )


def next_state_moments(x, delta_mean, delta_var, T_s: float):
    """Speed-integration update of mean and diagonal variance.

    Works on numpy or JAX arrays; ``x`` is ``(..., 4)`` and the velocity
    change moments are ``(..., 2)``.
    """
    xp = jnp if isinstance(x, jax.Array) or isinstance(delta_mean, jax.Array) else np
    q, qd = x[..., :2], x[..., 2:]
    mean = xp.concatenate([q + T_s * qd + 0.5 * T_s * delta_mean, qd + delta_mean], -1)
    var = xp.concatenate([(0.5 * T_s) ** 2 * delta_var, delta_var], -1)
    return mean, var


def fit_model(
    data: Dataset,
    plant: PlantParams | None,
    T_s: float,
    n_inducing: int | None = 400,
    init: list[SeKernelParams] | None = None,
    max_iter: int = 200,
    max_fit_points: int = 1500,
) -> GpModel:
    """Fit both joints' hyperparameters and choose the inducing set.

    Hyperparameters are fitted on at most ``max_fit_points`` samples chosen
    by farthest-point subsampling; ``n_inducing=None`` keeps the exact GP.
    """
    model = GpModel([SeKernelParams(1.0, np.ones(INPUT_DIM), 1.0)] * 2, data, plant, T_s)
    r = model.residuals()
    X = data.X
    kernels = []
    for i in range(2):
        start = init[i] if init is not None else default_init(X, r[:, i])
        idx = farthest_point_subset(X, min(max_fit_points, len(X)), start.Lambda)
        kernels.append(fit_hyperparams(X[idx], r[idx, i], start, max_iter=max_iter))
        log.info("joint %d hyperparameters: %s", i, kernels[-1])
    model.kernels = kernels
    if n_inducing is not None:
        # farthest-point selection in the first joint's metric, shared by both GPs
        model.inducing = farthest_point_subset(X, n_inducing, kernels[0].Lambda)
    return model
