"""Episode evaluation, surrogate metrics and a robustness perturbation suite.

These are stand-ins for the competition scores, not reproductions of them.

Success predicate: over the final ``SUCCESS_HOLD`` seconds of the episode
every logged state has ``|q1 - pi| < 0.1``, ``|q2| < 0.1`` (angles wrapped)
and ``|qd1|, |qd2| < 0.5``.

Metrics, all computed from the episode log alone:

* ``swingup_time``: earliest time from which the success box holds until
  the end (NaN when unsuccessful)
* ``time_to_roa``: first control tick whose state lies in the LQR region
  of attraction (NaN without a design or if never reached)
* ``energy``: sum over integrator steps of ``|u . qd| * dt``
* ``smoothness``: mean absolute change of the actuated torque between
  consecutive control ticks
* ``velocity_peak``: max ``|qd|``
* ``final_q_error`` / ``final_qd_error``: norms of the wrapped angle error and
  of the velocity at the last logged row
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, field
from typing import Callable

import numpy as np

from mcpilco.plant import UPRIGHT, EpisodeLog, PlantParams, SimConfig, episode, HANGING
from mcpilco.stabilizer import LqrDesign, wrap_error

SUCCESS_Q_TOL = 0.1
SUCCESS_QD_TOL = 0.5
SUCCESS_HOLD = 1.0

PERTURBATION_KINDS = ("torque-noise", "torque-step-offset", "measurement-noise", "measurement-delay", "parameter-scale")

# Fixed magnitude grids; the first entry of each is the unperturbed cell.
DEFAULT_GRIDS = {
    "torque-noise": (0.0, 0.1, 0.2, 0.4, 0.8, 1.6),  # N m, std of Gaussian noise per tick
    "torque-step-offset": (0.0, 0.1, 0.2, 0.4, 0.8),  # N m, constant bias
    "measurement-noise": (0.0, 0.002, 0.005, 0.01, 0.02),  # rad and rad/s std
    "measurement-delay": (0, 1, 2, 3),  # control ticks
    "parameter-scale": (1.0, 0.9, 1.1, 0.8, 1.2),  # multiplier on PerturbationSpec.parameter
}
NEUTRAL = {"parameter-scale": 1.0}

METRIC_FIELDS = (
    "success", "swingup_time", "time_to_roa", "energy", "smoothness",
    "velocity_peak", "final_q_error", "final_qd_error",
)


@dataclass(frozen=True)
class MetricsReport:
    success: bool
    swingup_time: float
    time_to_roa: float
    energy: float
    smoothness: float
    velocity_peak: float
    final_q_error: float
    final_qd_error: float
    failure: str | None = None

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _in_goal_box(states: np.ndarray) -> np.ndarray:
    e = wrap_error(states, UPRIGHT)
    return np.all(np.abs(e[:, :2]) < SUCCESS_Q_TOL, 1) & np.all(np.abs(e[:, 2:]) < SUCCESS_QD_TOL, 1)


def compute_metrics(log: EpisodeLog, horizon: float, design: LqrDesign | None = None) -> MetricsReport:
    """Metrics from a log; an incomplete log (fault or early divergence) is a failure."""
    states, torques, t = log.states, log.torques, log.t
    complete = log.failure is None and len(log) == int(round(horizon / log.dt))
    inside = _in_goal_box(states) if len(states) else np.zeros(0, bool)
    hold_rows = int(round(SUCCESS_HOLD / log.dt))
    success = bool(complete and len(inside) >= hold_rows and np.all(inside[-hold_rows:]))
    swingup = math.nan
    if success:
        outside = np.flatnonzero(~inside)
        swingup = float(t[outside[-1] + 1]) if len(outside) else float(t[0])
    k = int(round(log.control_dt / log.dt))
    ticks = states[::k]
    time_to_roa = math.nan
    if design is not None and len(ticks):
        hit = np.flatnonzero(design.value(ticks) < design.rho)
        if len(hit):
            time_to_roa = float(t[::k][hit[0]])
    energy = float(np.sum(np.abs(np.sum(torques * states[:, 2:], 1))) * log.dt) if len(states) else 0.0
    u_ticks = torques[::k].sum(1)  # only one joint is ever non-zero
    smoothness = float(np.mean(np.abs(np.diff(u_ticks)))) if len(u_ticks) > 1 else 0.0
    velocity_peak = float(np.max(np.abs(states[:, 2:]))) if len(states) else 0.0
    if len(states):
        e = wrap_error(states[-1], UPRIGHT)
        final_q, final_qd = float(np.linalg.norm(e[:2])), float(np.linalg.norm(e[2:]))
    else:
        final_q = final_qd = math.nan
    return MetricsReport(success, swingup, time_to_roa, energy, smoothness, velocity_peak, final_q, final_qd, log.failure)


def evaluate(
    plant: PlantParams,
    controller,
    sim: SimConfig = SimConfig(),
    design: LqrDesign | None = None,
    x0=HANGING,
    torque_hook=None,
) -> tuple[MetricsReport, EpisodeLog]:
    """Run one full-horizon episode and score it.

    Exceptions raised by the controller are recorded as a failed episode
    with an empty log rather than propagated.
    """
    try:
        log = episode(plant, sim, controller, x0, torque_hook=torque_hook)
    except Exception as exc:  # controller faults become failed episodes
        log = EpisodeLog(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 2)), sim.control_dt, sim.dt,
                         failure=f"{type(exc).__name__}: {exc}")
    return compute_metrics(log, sim.horizon, design), log


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float
    seed: int = 0
    parameter: str = "m2"

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {PERTURBATION_KINDS}")

    @property
    def is_neutral(self) -> bool:
        return self.magnitude == NEUTRAL.get(self.kind, 0.0)


def perturbed_setup(plant: PlantParams, controller, spec: PerturbationSpec):
    """Plant, controller and torque hook realising one perturbation cell."""
    rng = np.random.default_rng(spec.seed)
    hook = None
    ctrl = controller
    if spec.kind == "parameter-scale":
        plant = plant.scaled({spec.parameter: spec.magnitude})
    elif spec.kind == "torque-noise" and spec.magnitude > 0:
        def hook(tick, u):
            return u + spec.magnitude * rng.standard_normal(2)
    elif spec.kind == "torque-step-offset" and spec.magnitude != 0:
        def hook(tick, u):
            return u + spec.magnitude
    elif spec.kind == "measurement-noise" and spec.magnitude > 0:
        def ctrl(x):
            return controller(x + spec.magnitude * rng.standard_normal(4))
    elif spec.kind == "measurement-delay" and spec.magnitude > 0:
        delay = int(spec.magnitude)
        buffer: list[np.ndarray] = []

        def ctrl(x):
            buffer.append(np.array(x))
            return controller(buffer[max(0, len(buffer) - 1 - delay)])
    return plant, ctrl, hook


def default_suite(seeds=(0, 1, 2), grids=None, parameter: str = "m2") -> list[PerturbationSpec]:
    grids = DEFAULT_GRIDS if grids is None else grids
    return [
        PerturbationSpec(kind, float(mag), seed, parameter)
        for kind, mags in grids.items()
        for mag in mags
        for seed in seeds
    ]


@dataclass
class RobustnessResult:
    rows: list[tuple[str, float, int, bool]] = field(default_factory=list)

    def fractions(self) -> dict[tuple[str, float], float]:
        cells: dict[tuple[str, float], list[bool]] = {}
        for kind, mag, _, ok in self.rows:
            cells.setdefault((kind, mag), []).append(ok)
        return {key: float(np.mean(v)) for key, v in cells.items()}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("kind", "magnitude", "seed", "success"))
            for kind, mag, seed, ok in self.rows:
                w.writerow((kind, repr(float(mag)), seed, int(ok)))


def robustness_suite(
    plant: PlantParams,
    make_controller: Callable[[], Callable],
    specs: list[PerturbationSpec],
    sim: SimConfig = SimConfig(),
    design: LqrDesign | None = None,
) -> RobustnessResult:
    """Run one episode per perturbation cell with a fresh controller and record success."""
    result = RobustnessResult()
    for spec in specs:
        p, ctrl, hook = perturbed_setup(plant, make_controller(), spec)
        report, _ = evaluate(p, ctrl, sim, design, torque_hook=hook)
        result.rows.append((spec.kind, float(spec.magnitude), spec.seed, report.success))
    return result


def write_metrics_csv(path, reports: list[tuple[str, MetricsReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("episode",) + METRIC_FIELDS)
        for name, r in reports:
            w.writerow([name] + [int(v) if isinstance(v, bool) else repr(float(v)) for v in r.row().values()])
