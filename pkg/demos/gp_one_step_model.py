"""Fit the velocity-change GP on random exploration and check it on held-out data.

    python demos/gp_one_step_model.py [robot]

The physics prior mean alone is compared with the fitted posterior on
states from a second exploration episode the model never saw.
"""

import sys

import numpy as np

from mcpilco import config
from mcpilco.gpdyn import Dataset, fit_model, prior_mean
from mcpilco.optimizer import exploration_controller
from mcpilco.plant import SimConfig, episode


def main(robot="pendubot"):
    rc = config.build(config.resolve({"robot": robot}))
    u_max = rc.trials.u_max_fraction * rc.plant.torque_limit
    explore = SimConfig(horizon=3.0)
    train = Dataset.from_log(episode(rc.plant, explore, exploration_controller(u_max, 0)), rc.plant.actuated)
    test = Dataset.from_log(episode(rc.plant, explore, exploration_controller(u_max, 1)), rc.plant.actuated)
    model = fit_model(train, rc.plant, rc.sim.control_dt, n_inducing=None)
    for i, k in enumerate(model.kernels):
        print(f"joint {i + 1}: lambda {k.lam:.3f}, sqrt(Lambda) {np.array2string(np.sqrt(k.Lambda), precision=2)}, noise {k.noise_var:.1e}")
    prior = prior_mean(rc.plant, rc.sim.control_dt, test.X)
    mean, var = model.posterior(test.X)
    rms = lambda e: np.sqrt(np.mean(e**2, 0))
    print(f"held-out RMS velocity-change error, prior only: {np.array2string(rms(prior - test.Y), precision=4)} rad/s")
    print(f"held-out RMS velocity-change error, posterior:  {np.array2string(rms(mean - test.Y), precision=4)} rad/s")
    z = (mean - test.Y) / np.sqrt(var)
    print(f"fraction of errors within 2 predicted std: {np.mean(np.abs(z) < 2):.2f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
