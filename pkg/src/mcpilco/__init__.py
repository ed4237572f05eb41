"""Monte Carlo policy search with a Gaussian-process dynamics model.

Swing-up of the Pendubot and Acrobot double pendulums, with an LQR
stabilizer that takes over inside its region of attraction.

Modules:

* :mod:`mcpilco.plant` - double-pendulum simulator and episode logs
* :mod:`mcpilco.gpdyn` - GP model of the joint velocity changes
* :mod:`mcpilco.policy` - squashed RBF policy with dropout
* :mod:`mcpilco.objective` - saturated distance cost
* :mod:`mcpilco.optimizer` - particle rollouts, gradient updates, trial loop
* :mod:`mcpilco.stabilizer` - LQR design, region of attraction, hybrid switch
* :mod:`mcpilco.harness` - metrics and robustness suite
* :mod:`mcpilco.cli` - ``mcpilco`` command line
"""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
