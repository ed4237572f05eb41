"""Design the upright LQR for both robots and probe its region of attraction.

    python demos/lqr_region_of_attraction.py

Prints the gain, the certified level rho of the quadratic form, how many
sampled states inside and just outside the level set the nonlinear plant
brings back, and the torque the stabilizer spends at the equilibrium.
"""

import numpy as np

from mcpilco import config
from mcpilco.plant import UPRIGHT
from mcpilco.stabilizer import closed_loop_converges, design_lqr, ellipsoid_samples, riccati_residual


def main():
    for robot in ("pendubot", "acrobot"):
        rc = config.build(config.resolve({"robot": robot}))
        d = design_lqr(rc.plant, rc.sim)
        print(f"{robot}: K = {np.array2string(d.K[0], precision=2)}, rho = {d.rho:.1f}")
        print(f"  Riccati residual {riccati_residual(d.A, d.B, d.Q, d.R, d.S):.1e}")
        rng = np.random.default_rng(0)
        inside = UPRIGHT + ellipsoid_samples(d.S, d.rho, 50, rng, inside=True)
        outside = UPRIGHT + ellipsoid_samples(d.S, 4.0 * d.rho, 50, rng)
        print(f"  inside the level set: {closed_loop_converges(rc.plant, d, inside).sum()}/50 stabilised")
        print(f"  on the 4x level set:  {closed_loop_converges(rc.plant, d, outside).sum()}/50 stabilised")
        print(f"  torque at the equilibrium: {d.torque(UPRIGHT) + 0.0:.1f} N m")


if __name__ == "__main__":
    main()
