import csv
import subprocess
import sys

import pytest

from manrl.cli import main
from manrl.envs import mdp_generate
from manrl.tabular import value_iteration

QUICK = ["--set", "hidden=8", "--set", "warmup=10", "--set", "batch_size=4", "--set", "episodes=3"]


def test_train_then_eval(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("agent = man\nhidden = 8\nwarmup = 10\nbatch_size = 4\nepisodes = 3\n")
    assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train_seed7.csv").exists()
    assert (tmp_path / "agent_seed7.npz").exists()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "agent_seed7.npz"), "--episodes", "4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("mean return") and len(out) == 5


def test_oracle_prints_values(tmp_path, capsys):
    mdp = mdp_generate(1, 4, 2, 2)
    mdp.export(tmp_path / "m.txt")
    assert main(["oracle", "--mdp", str(tmp_path / "m.txt"), "--gamma", "0.9", "--tol", "1e-10",
                 "--out", str(tmp_path / "v.csv")]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    v = value_iteration(mdp, 0.9, 1e-10).v_star
    assert [float(r["v_star"]) for r in rows] == pytest.approx(list(v), abs=1e-12)
    assert (tmp_path / "v.csv").read_text().splitlines()[0] == "state,v_star,a_first,a_second"


def test_compare_columns(tmp_path):
    assert main(["compare", "--agents", "man,dqn,ddqn", "--env", "blockstack", "--seeds", "2",
                 "--out", str(tmp_path), *QUICK]) == 0
    with open(tmp_path / "compare.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["agent", "seed", "episode", "return", "max_height", "bumpiness"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1", "--n", "3"]) == 0
    assert "3/3 architectures passed" in capsys.readouterr().out


def test_plot_data(tmp_path):
    main(["train", "--seed", "0", "--out", str(tmp_path), *QUICK])
    assert main(["plot-data", "--csv", str(tmp_path / "train_seed0.csv"),
                 "--out", str(tmp_path / "s.csv"), "--window", "2"]) == 0
    assert (tmp_path / "s.csv").read_text().startswith("agent,seed,episode,return_smoothed")


def test_error_exit_codes(tmp_path):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["oracle", "--mdp", str(tmp_path / "missing.txt")]) == 2
    assert main(["train", "--set", "agent=nope", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("2 1 1 0.9\n0 0 0 0 0.3 1\n")
    assert main(["oracle", "--mdp", str(bad)]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "manrl", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
