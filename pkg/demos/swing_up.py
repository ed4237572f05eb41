"""Train a swing-up policy with the trial loop and hand it to the LQR.

    python demos/swing_up.py [robot] [seed]

Uses the desk-scale settings in configs/<robot>.yaml. Each trial prints the
optimised cost and whether the 10 s hybrid episode succeeds; the run stops
at the first success. Expect 10-30 minutes on one core.
"""

import sys
from pathlib import Path

from mcpilco import config, harness
from mcpilco.optimizer import run_trials
from mcpilco.policy import as_controller
from mcpilco.stabilizer import design_lqr, hybrid_controller

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main(robot="pendubot", seed="0"):
    rc = config.build(config.load(CONFIGS / f"{robot}.yaml", seed=int(seed)))
    st = rc.stabilizer
    design = design_lqr(rc.plant, rc.sim, Q=st["Q"], R=st["R"], n_samples=st["roa_samples"], seed=st["roa_seed"])

    def on_trial(k, result):
        if result.curves and k > 1:
            finite = [row[1] for row in result.curves[-1].rows if row[1] == row[1]]
            print(f"trial {k}: J_hat {finite[0]:.1f} -> {min(finite):.1f} over {len(result.curves[-1].rows)} iterations")
        else:
            print(f"trial {k}: exploration, {len(result.datasets[0])} samples")

    def succeeded(policy, model):
        report, _ = harness.evaluate(rc.plant, hybrid_controller(as_controller(policy), design), rc.sim, design)
        print(f"  10 s hybrid episode: success={report.success}, time to RoA {report.time_to_roa:.2f} s")
        return report.success and report.time_to_roa <= rc.cost.horizon + 0.5

    result = run_trials(rc.plant, rc.sim, rc.cost, rc.optim, rc.trials, stop_when=succeeded, on_trial=on_trial)
    print("solved" if result.stopped_early else "not solved within the trial budget")


if __name__ == "__main__":
    main(*sys.argv[1:])
