"""Command-line entry point: ``mcpilco {train,rollout,evaluate,export-gains}``.

Every command writes ``config.yaml`` (the resolved configuration) into its
output directory. A command that fails writes ``failure.json`` there and
exits with status 1; otherwise the exit status is 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

log = logging.getLogger("mcpilco")


def _set_threads(n: int | None) -> None:
    # only effective before jax is first imported
    if n:
        os.environ["XLA_FLAGS"] = f"--xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
        os.environ.setdefault("OMP_NUM_THREADS", str(n))


def _load_config(args):
    from mcpilco import config

    overrides = {"robot": args.robot, "seed": args.seed, "output_dir": args.out}
    if args.config:
        return config.load(args.config, **overrides)
    return config.resolve({}, **overrides)


def _write_failure(out: Path, exc: BaseException) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
    curve = getattr(exc, "curve", None)
    if curve is not None:
        curve.to_csv(out / "failed_curve.csv")
    (out / "failure.json").write_text(json.dumps(report, indent=2))


def save_policy_bundle(path, policy, design, cfg: dict, final: bool, success: bool) -> None:
    from mcpilco import config

    extra = design.to_arrays() if design is not None else {}
    policy.save(
        path,
        robot=cfg["robot"],
        config=json.dumps(cfg, sort_keys=True),
        config_hash=config.config_hash(cfg),
        final=final,
        success=success,
        **extra,
    )


def load_policy_bundle(path):
    from mcpilco.policy import PolicyParams
    from mcpilco.stabilizer import LqrDesign

    policy, extra = PolicyParams.load(path)
    design = LqrDesign.from_arrays(extra) if "lqr_K" in extra else None
    cfg = json.loads(str(extra["config"]))
    return policy, design, cfg, extra


def cmd_train(args) -> Path:
    from mcpilco import config, harness
    from mcpilco.optimizer import run_trials
    from mcpilco.policy import as_controller
    from mcpilco.stabilizer import design_lqr, hybrid_controller

    cfg = _load_config(args)
    rc = config.build(cfg)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(cfg, out / "config.yaml")
    st = rc.stabilizer
    design = design_lqr(rc.plant, rc.sim, Q=st["Q"], R=st["R"], n_samples=st["roa_samples"], seed=st["roa_seed"])
    trial_rows = []

    def success(policy, model):
        ctrl = hybrid_controller(as_controller(policy), design)
        report, _ = harness.evaluate(rc.plant, ctrl, rc.sim, design)
        ok = report.success and report.time_to_roa <= rc.cost.horizon + 0.5
        trial_rows.append((len(trial_rows) + 2, len(model.data), report.success, report.time_to_roa, ok))
        return ok and rc.stop_on_success

    def on_trial(k, result):
        result.logs[-1].to_csv(out / f"trial_{k:02d}.csv")
        if result.curves and k > 1:
            result.curves[-1].to_csv(out / f"curve_trial_{k:02d}.csv")
            save_policy_bundle(out / f"policy_trial_{k:02d}.npz", result.policy, design, cfg, final=False, success=False)
            result.model.save(out / f"model_trial_{k:02d}.npz")  # the model this policy was optimised on
        log.info("trial %d done, %d samples", k, sum(len(d) for d in result.datasets))

    result = run_trials(rc.plant, rc.sim, rc.cost, rc.optim, rc.trials, stop_when=success, on_trial=on_trial)
    result.model.save(out / "model.npz")
    with open(out / "trials.csv", "w") as fh:
        fh.write("trial,n_model_samples,success,time_to_roa,accepted\n")
        for row in trial_rows:
            fh.write(f"{row[0]},{row[1]},{int(row[2])},{row[3]!r},{int(row[4])}\n")
    if result.policy is not None:
        ok = bool(trial_rows and trial_rows[-1][4])
        save_policy_bundle(out / "policy.npz", result.policy, design, cfg, final=True, success=ok)
    return out


def _checkpoint_setup(args):
    from mcpilco import config

    policy, design, cfg, _ = load_policy_bundle(args.checkpoint)
    if args.robot is not None and args.robot != cfg["robot"]:
        raise config.ConfigError(f"checkpoint was trained for {cfg['robot']}, not {args.robot}")
    if args.config:
        import yaml

        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        if raw.get("robot", cfg["robot"]) != cfg["robot"]:
            raise config.ConfigError(f"checkpoint was trained for {cfg['robot']}, config asks for {raw['robot']}")
        cfg = config.resolve({**{k: v for k, v in cfg.items()}, **raw})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["output_dir"] = args.out
    return policy, design, cfg, config.build(cfg)


def cmd_rollout(args) -> Path:
    from mcpilco import config, harness
    from mcpilco.policy import as_controller
    from mcpilco.stabilizer import hybrid_controller

    policy, design, cfg, rc = _checkpoint_setup(args)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(cfg, out / "config.yaml")
    controller = hybrid_controller(as_controller(policy), design) if design is not None else as_controller(policy)
    report, episode_log = harness.evaluate(rc.plant, controller, rc.sim, design)
    episode_log.to_csv(out / "rollout.csv")
    harness.write_metrics_csv(out / "metrics.csv", [("nominal", report)])
    if episode_log.failure:
        raise RuntimeError(episode_log.failure)
    return out


def cmd_evaluate(args) -> Path:
    from mcpilco import config, harness
    from mcpilco.policy import as_controller
    from mcpilco.stabilizer import hybrid_controller

    policy, design, cfg, rc = _checkpoint_setup(args)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(cfg, out / "config.yaml")

    def make():
        if design is None:
            return as_controller(policy)
        return hybrid_controller(as_controller(policy), design)

    report, episode_log = harness.evaluate(rc.plant, make(), rc.sim, design)
    episode_log.to_csv(out / "episode_nominal.csv")
    harness.write_metrics_csv(out / "metrics.csv", [("nominal", report)])
    grids = rc.harness["perturbations"]
    if grids:
        specs = harness.default_suite(seeds=rc.harness["seeds"], grids=grids, parameter=rc.harness["parameter"])
        result = harness.robustness_suite(rc.plant, make, specs, rc.sim, design)
        result.to_csv(out / "robustness.csv")
    return out


def cmd_export_gains(args) -> Path:
    from mcpilco import config

    policy, design, cfg, rc = _checkpoint_setup(args)
    if design is None:
        raise config.ConfigError("checkpoint has no LQR design")
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(cfg, out / "config.yaml")
    gains = {
        "robot": cfg["robot"],
        "x_eq": design.x_eq.tolist(),
        "T_s": design.T_s,
        "K": design.K.tolist(),
        "S": design.S.tolist(),
        "rho": design.rho,
        "Q": design.Q.tolist(),
        "R": design.R.tolist(),
        "actuated_joint": design.actuated,
    }
    (out / "gains.json").write_text(json.dumps(gains, indent=2, sort_keys=True))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcpilco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint: bool):
        if checkpoint:
            p.add_argument("checkpoint", help="policy checkpoint (policy.npz)")
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--robot", choices=("pendubot", "acrobot"))
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="run the trial loop"), checkpoint=False)
    common(sub.add_parser("rollout", help="simulate one hybrid-controller episode"), checkpoint=True)
    common(sub.add_parser("evaluate", help="metrics and robustness suite"), checkpoint=True)
    common(sub.add_parser("export-gains", help="write the LQR design as JSON"), checkpoint=True)
    return parser


COMMANDS = {"train": cmd_train, "rollout": cmd_rollout, "evaluate": cmd_evaluate, "export-gains": cmd_export_gains}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    _set_threads(args.threads)
    out = Path(args.out) if args.out else None
    try:
        if out is None:
            out = Path(_load_config(args)["output_dir"]) if args.command == "train" else Path(".")
        result = COMMANDS[args.command](args)
    except Exception as exc:
        _write_failure(out, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
