import json

import pytest

from fencoder.cli import main
from fencoder.worlds import WorldSpec, generate_world, rollout, expert_policy, write_trajectory

TINY = {
    "world": {"n_train": 3, "n_holdout": 2, "trajectories_per_context": 4, "horizon": 20},
    "train": {"total_steps": 10, "hidden": 8, "n_hidden": 1, "batch_size": 16,
              "gram_probes": 32, "k": 3},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--world", "grid", "--seed", "1", "--config", str(cfg),
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--seed", "1", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    assert main(["train", "--seed", "1", "--config", str(cfg), "--data", str(root / "data"),
                 "--model", "mono", "--out", str(root / "mono")]) == 0
    spec = WorldSpec(**dict(TINY["world"]))
    _, hold, _, _ = generate_world(spec, 1)
    traj, _ = rollout(expert_policy(hold[0]), hold[0], [0.1, 0.1], [0.9, 0.8], 40)
    write_trajectory(root / "one_traj.jsonl", traj)
    return root, cfg


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def _run_twice(tmp_path, argv):
    outs = []
    for name in ("a", "b"):
        assert main(argv + ["--out", str(tmp_path / name)]) == 0
        outs.append(_files(tmp_path / name))
    assert outs[0] and outs[0] == outs[1]
    return outs[0]


def test_gen_data_deterministic(tmp_path, workspace):
    _, cfg = workspace
    files = _run_twice(tmp_path, ["gen-data", "--world", "grid", "--seed", "1", "--config", str(cfg)])
    assert set(files) == {"data.jsonl", "manifest.json"}


def test_gen_data_1d(tmp_path):
    files = _run_twice(tmp_path, ["gen-data", "--world", "1d", "--seed", "2"])
    assert json.loads(files["manifest.json"])["world"]["kind"] == "1d"


def test_train_deterministic(tmp_path, workspace):
    root, cfg = workspace
    files = _run_twice(tmp_path, ["train", "--seed", "1", "--config", str(cfg),
                                  "--data", str(root / "data")])
    assert files["history.csv"].startswith(b"step,loss_l1,loss_reg,lr\n")
    assert files == _files(root / "run")


def test_adapt_writes_alpha(tmp_path, workspace, capsys):
    root, _ = workspace
    files = _run_twice(tmp_path, ["adapt", "--demo", str(root / "one_traj.jsonl"),
                                  "--ckpt", str(root / "run" / "checkpoint.json")])
    doc = json.loads(files["alpha.json"])
    assert set(doc) == {"context_id", "alpha", "k", "solver_objective", "wall_ms"}
    assert doc["k"] == 3 and len(doc["alpha"]) == 3 and doc["wall_ms"] is None
    assert "ms" in capsys.readouterr().out
    assert main(["adapt", "--timing", "--demo", str(root / "one_traj.jsonl"),
                 "--ckpt", str(root / "run" / "checkpoint.json"), "--out", str(tmp_path / "t")]) == 0
    assert json.loads((tmp_path / "t" / "alpha.json").read_text())["wall_ms"] >= 0


def test_eval_deterministic(tmp_path, workspace):
    root, _ = workspace
    files = _run_twice(tmp_path, ["eval", "--ckpt", str(root / "run" / "checkpoint.json"),
                                  "--data", str(root / "data"), "--calib", "40",
                                  "--baseline", str(root / "mono" / "checkpoint.json")])
    lines = files["report.csv"].decode().splitlines()
    assert lines[1] == "context_id,split,mean_l1,n" and len(lines) == 2 + 5


def test_rollout_eval_deterministic(tmp_path, workspace):
    root, _ = workspace
    files = _run_twice(tmp_path, ["rollout-eval", "--ckpt", str(root / "run" / "checkpoint.json"),
                                  "--data", str(root / "data"), "--calib", "40",
                                  "--rollouts", "2", "--horizon", "20"])
    assert len(files["rollouts.csv"].decode().splitlines()) == 1 + 2


def test_pca_deterministic(tmp_path, workspace):
    root, cfg = workspace
    files = _run_twice(tmp_path, ["pca", "--ckpt", str(root / "run" / "checkpoint.json"),
                                  "--config", str(cfg), "--per-family", "2", "--calib", "40",
                                  "--svg"])
    assert {"projection.csv", "clusters.json", "projection.svg"} <= set(files)


def test_overfit_demo_deterministic(tmp_path, workspace):
    _, cfg = workspace
    files = _run_twice(tmp_path, ["overfit-demo", "--config", str(cfg), "--seed", "3",
                                  "--calib", "40", "--svg"])
    assert {"curves.csv", "summary.json", "history_fe.csv", "history_mono.csv",
            "curves.svg"} <= set(files)


def test_check_suites(tmp_path, capsys):
    files = _run_twice(tmp_path, ["solver-check", "--problems", "20"])
    assert "20/20" in capsys.readouterr().out
    assert files["solver_check.csv"].count(b"\n") == 21
    files = _run_twice(tmp_path / "g", ["grad-check", "--nets", "6"])
    assert "6/6" in capsys.readouterr().out


def test_unknown_flag_is_validation_error(capsys):
    assert main(["solver-check", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1
    assert main([]) == 1


def test_bad_inputs_are_validation_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"not_a_field": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none.json"), "--data", str(tmp_path)]) == 1
    neg = tmp_path / "neg.json"
    neg.write_text(json.dumps({"world": {"n_train": 0}}))
    assert main(["gen-data", "--config", str(neg), "--out", str(tmp_path / "y")]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
