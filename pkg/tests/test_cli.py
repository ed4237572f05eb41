import json

import numpy as np
import pytest
import yaml

from mcpilco import cli, config
from mcpilco.plant import LOG_HEADER

TINY = {
    "robot": "pendubot",
    "sim": {"horizon": 2.0},
    "cost": {"horizon": 0.4},
    "gp": {"n_inducing": 20, "max_iter": 20, "max_fit_points": 200},
    "policy": {"n_basis": 8},
    "optimizer": {"n_particles": 8, "max_iters": 12},
    "trials": {"n_trials": 2, "explore_duration": 1.0, "stop_on_success": False},
    "stabilizer": {"roa_samples": 8},
    "harness": {"seeds": [0], "perturbations": {"torque-noise": [0.0, 0.2]}},
}


def write_config(path, **changes):
    raw = {**TINY, **changes}
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml")
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg, root / "run"


def test_train_writes_the_run_directory(trained):
    _, _, run = trained
    for name in ("config.yaml", "trial_01.csv", "trial_02.csv", "curve_trial_02.csv", "model_trial_02.npz", "model.npz", "policy.npz", "trials.csv"):
        assert (run / name).exists(), name
    assert not (run / "failure.json").exists()
    header = (run / "curve_trial_02.csv").read_text().splitlines()[0]
    assert header == "iter,J_hat,grad_norm,dropout_p"
    snapshot = yaml.safe_load((run / "config.yaml").read_text())
    assert snapshot == config.resolve(TINY, output_dir=str(run))


def test_policy_checkpoint_is_loadable(trained):
    _, _, run = trained
    policy, design, cfg, extra = cli.load_policy_bundle(run / "policy.npz")
    assert policy.n_basis == 8 and design is not None and cfg["robot"] == "pendubot"
    assert bool(extra["final"])


def test_rerun_gives_identical_csvs(trained, tmp_path):
    root, cfg, run = trained
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("trial_01.csv", "trial_02.csv", "curve_trial_02.csv", "trials.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (run / name).read_bytes(), name


def test_single_trial_has_no_final_policy(tmp_path):
    cfg = write_config(tmp_path / "one.yaml", trials={"n_trials": 1, "explore_duration": 1.0})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "trial_01.csv").exists() and (tmp_path / "run" / "model.npz").exists()
    assert not (tmp_path / "run" / "policy.npz").exists()


def test_unknown_key_is_reported_with_a_failure_file(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", optimizer={"n_particle": 8})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1
    report = json.loads((tmp_path / "run" / "failure.json").read_text())
    assert report["error"] == "ConfigError" and "optimizer.n_particle" in report["message"]
    assert "n_particle" in capsys.readouterr().err


def test_rollout_log_schema_and_limits(trained, tmp_path):
    _, _, run = trained
    assert cli.main(["rollout", str(run / "policy.npz"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "rollout.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == LOG_HEADER
    assert len(lines) - 1 == round(2.0 / 0.002)
    data = np.loadtxt(tmp_path / "rollout.csv", delimiter=",", skiprows=1)
    assert np.abs(data[:, 5:]).max() <= 10.0
    np.testing.assert_array_equal(data[:, 6], 0.0)
    assert (tmp_path / "config.yaml").exists() and (tmp_path / "metrics.csv").exists()


def test_robot_mismatch_is_rejected(trained, tmp_path):
    _, _, run = trained
    assert cli.main(["rollout", str(run / "policy.npz"), "--robot", "acrobot", "--out", str(tmp_path)]) == 1
    assert "acrobot" in json.loads((tmp_path / "failure.json").read_text())["message"]


def test_evaluate_is_byte_identical_and_counts_cells(trained, tmp_path):
    root, cfg, run = trained
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["evaluate", str(run / "policy.npz"), "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("metrics.csv", "robustness.csv", "episode_nominal.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    rows = (outs[0] / "robustness.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 1  # two magnitudes, one seed


def test_evaluate_with_empty_suite_writes_metrics_only(trained, tmp_path):
    root, _, run = trained
    cfg = write_config(root / "nosuite.yaml", harness={"perturbations": {}})
    assert cli.main(["evaluate", str(run / "policy.npz"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").exists() and not (tmp_path / "robustness.csv").exists()


def test_export_gains(trained, tmp_path):
    _, _, run = trained
    assert cli.main(["export-gains", str(run / "policy.npz"), "--out", str(tmp_path)]) == 0
    gains = json.loads((tmp_path / "gains.json").read_text())
    assert gains["robot"] == "pendubot" and len(gains["K"][0]) == 4 and gains["rho"] > 0
    assert gains["actuated_joint"] == 0


def test_missing_checkpoint_fails(tmp_path):
    assert cli.main(["evaluate", str(tmp_path / "nope.npz"), "--out", str(tmp_path)]) == 1
    assert (tmp_path / "failure.json").exists()
