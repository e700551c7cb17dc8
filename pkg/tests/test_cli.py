import csv
import json

import numpy as np
import pytest

from backflow.cli import OUTPUT_ENV_VAR, config_hash, load_config, main, read_trajectory
from backflow.exceptions import ConfigError
from backflow.measure import n_total

TINY = """
model.horizon = 2.0
model.control_bins = 10
model.substeps = 10
"""


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(TINY + text)
    return str(path)


def run(args):
    code = main([str(a) for a in args])
    return code


def summary(out):
    return json.loads((out / "summary.json").read_text())


def data_files(out):
    return {p.name: p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def assert_summary_matches_trajectory(out):
    traj = read_trajectory(out / "trajectory.csv")
    dt = traj["t"][1] - traj["t"][0]
    assert abs(summary(out)["n_tot"] - n_total(traj["D"], dt)) < 1e-12


# config


def test_load_config_defaults_and_seed_override():
    cfg = load_config(None, seed=7)
    assert cfg["seed"] == 7
    assert cfg["model.gamma_coupling"] == 5.0
    assert cfg["method.name"] == "baseline"


def test_config_hash_is_canonical(tmp_path):
    a = tmp_path / "a.toml"
    b = tmp_path / "b.toml"
    a.write_text("seed = 1\nmodel.horizon = 2.0\n")
    b.write_text("model.horizon = 2.0\nseed = 1\n")
    assert config_hash(load_config(a)) == config_hash(load_config(b))
    assert config_hash(load_config(a)) != config_hash(load_config(a, seed=2))


@pytest.mark.parametrize("text", ['model.gamma_coupling = -1.0\n', 'method.name = "grape"\n',
                                  'model.unknown = 3\n', 'method.name = "ppo"\n'
                                  'method.ppo.clip_eps = 2.0\n', 'seed = "x"\n',
                                  'method.name = "ppo"\nmethod.sac.temperature = 0.1\n',
                                  'model.horizon = \n'])
def test_invalid_configs_exit_with_code_2(tmp_path, capsys, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    assert run(["train", "--config", path, "--out", tmp_path / "o"]) == 2
    assert "config error" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file_exit_code(tmp_path):
    assert run(["gamma", "--config", tmp_path / "none.toml", "--out", tmp_path / "o"]) == 2


def test_wrong_method_for_command(tmp_path):
    cfg = write_config(tmp_path, 'method.name = "ppo"\n')
    assert run(["oct", "--config", cfg, "--out", tmp_path / "o"]) == 2
    cfg = write_config(tmp_path, 'method.name = "powell"\n')
    assert run(["train", "--config", cfg, "--out", tmp_path / "o"]) == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    # the time-local engine cannot follow strong driving and reports lost positivity
    cfg = write_config(tmp_path, 'model.engine = "tcl"\nmethod.name = "powell"\n'
                                 'method.powell.max_outer_iterations = 1\n')
    assert run(["oct", "--config", cfg, "--out", tmp_path / "o"]) == 3
    assert "numeric failure" in capsys.readouterr().err


# gamma and baseline


def test_gamma_windows_strong_and_markovian(tmp_path):
    out = tmp_path / "strong"
    assert run(["gamma", "--out", out]) == 0
    with open(out / "gamma.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "gamma"]
    assert len(rows) == 2001
    assert float(rows[1][0]) == 0.0 and float(rows[-1][0]) == 7.0
    assert len(json.loads((out / "windows.json").read_text())) >= 3

    cfg = write_config(tmp_path, "model.gamma_coupling = 0.3\n")
    out = tmp_path / "weak"
    assert run(["gamma", "--config", cfg, "--out", out]) == 0
    assert json.loads((out / "windows.json").read_text()) == []


def test_baseline_regimes(tmp_path):
    out = tmp_path / "strong"
    assert run(["baseline", "--out", out]) == 0
    assert summary(out)["n_tot"] > 0.1
    assert_summary_matches_trajectory(out)
    with open(out / "trajectory.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["k", "t", "Omega", "D", "Ddot", "gamma", "n_loc"]

    cfg = write_config(tmp_path, "model.gamma_coupling = 0.3\n")
    out = tmp_path / "weak"
    assert run(["baseline", "--config", cfg, "--out", out]) == 0
    assert abs(summary(out)["n_tot"]) < 1e-12


def test_baseline_reruns_are_byte_identical(tmp_path):
    assert run(["baseline", "--out", tmp_path / "a"]) == 0
    assert run(["baseline", "--out", tmp_path / "b"]) == 0
    assert data_files(tmp_path / "a") == data_files(tmp_path / "b")


def test_output_dir_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, f'output_dir = "{tmp_path / "from_config"}"\n')
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(tmp_path / "from_env"))
    assert run(["baseline", "--config", cfg]) == 0
    assert (tmp_path / "from_env" / "summary.json").exists()
    assert not (tmp_path / "from_config").exists()
    assert run(["baseline", "--config", cfg, "--out", tmp_path / "from_flag"]) == 0
    assert (tmp_path / "from_flag" / "summary.json").exists()


# oct


@pytest.mark.parametrize("method", ["powell", "lbfgsb"])
def test_oct_runs(tmp_path, method):
    key = "max_outer_iterations" if method == "powell" else "max_iterations"
    cfg = write_config(tmp_path, f'method.name = "{method}"\nmethod.{method}.{key} = 2\n')
    out = tmp_path / method
    assert run(["oct", "--config", cfg, "--out", out]) == 0
    s = summary(out)
    assert s["n_tot"] >= s["initial_n_tot"]
    assert s["n_tot"] > s["uncontrolled_n_tot"]
    assert_summary_matches_trajectory(out)
    with open(out / "convergence.csv") as fh:
        values = [float(r["n_tot"]) for r in csv.DictReader(fh)]
    assert np.all(np.diff(values) >= 0)
    assert {"convergence.csv", "pulse.csv", "trajectory.csv", "summary.json"} <= set(s["files"])


# train, eval and report


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    dirs = {}
    for method, extra in (("ppo", "method.ppo.total_steps = 200\nmethod.ppo.rollout_episodes = 4\n"),
                          ("sac", "method.sac.total_steps = 200\nmethod.sac.warmup_steps = 50\n"
                                  "method.sac.batch_size = 32\n"
                                  "method.sac.hidden_sizes = [16, 16]\n")):
        cfg = write_config(root, f'method.name = "{method}"\n{extra}', f"{method}.toml")
        dirs[method] = root / method
        assert run(["train", "--config", cfg, "--out", dirs[method]]) == 0
        dirs[method + "_config"] = cfg
    return root, dirs


def test_train_writes_reproducible_files(trained, tmp_path):
    _, dirs = trained
    for method in ("ppo", "sac"):
        s = summary(dirs[method])
        assert s["status"] == "ok"
        assert_summary_matches_trajectory(dirs[method])
        assert {"checkpoint.json", "convergence.csv", "pulse.csv"} <= set(s["files"])
    rerun = tmp_path / "ppo_again"
    assert run(["train", "--config", dirs["ppo_config"], "--out", rerun]) == 0
    assert data_files(rerun) == data_files(dirs["ppo"])


def test_eval_reproduces_training_summary(trained, tmp_path):
    _, dirs = trained
    for method in ("ppo", "sac"):
        out = tmp_path / method
        assert run(["eval", dirs[method], "--out", out]) == 0
        assert summary(out)["n_tot"] == summary(dirs[method])["n_tot"]
        assert (out / "trajectory.csv").read_bytes() == \
            (dirs[method] / "trajectory.csv").read_bytes()


def test_eval_without_checkpoint(tmp_path):
    assert run(["eval", tmp_path, "--out", tmp_path / "o"]) == 2


def test_report_four_methods(trained, tmp_path, capsys):
    root, dirs = trained
    runs = [dirs["ppo"], dirs["sac"]]
    for method in ("powell", "lbfgsb"):
        key = "max_outer_iterations" if method == "powell" else "max_iterations"
        cfg = write_config(tmp_path, f'method.name = "{method}"\nmethod.{method}.{key} = 1\n',
                           f"{method}.toml")
        assert run(["oct", "--config", cfg, "--out", tmp_path / method]) == 0
        runs.append(tmp_path / method)
    out = tmp_path / "report"
    assert run(["report", *runs, "--out", out]) == 0
    with open(out / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["ppo", "sac", "powell", "lbfgsb"]
    assert all(int(r["n_loc_support"]) >= 0 for r in rows)
    with open(out / "n_loc.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["k", "t", "ppo", "sac", "powell", "lbfgsb"]
    report = json.loads((out / "report.json").read_text())
    assert report["rl_support_at_least_oct"] in (True, False)


def test_report_single_run_pass_through(tmp_path):
    assert run(["baseline", "--out", tmp_path / "b"]) == 0
    assert run(["report", tmp_path / "b", "--out", tmp_path / "r"]) == 0
    with open(tmp_path / "r" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert float(rows[0]["n_tot"]) == summary(tmp_path / "b")["n_tot"]


def test_report_refuses_mixed_models(tmp_path, capsys):
    assert run(["baseline", "--out", tmp_path / "strong"]) == 0
    cfg = write_config(tmp_path, "model.gamma_coupling = 0.3\n")
    assert run(["baseline", "--config", cfg, "--out", tmp_path / "weak"]) == 0
    code = run(["report", tmp_path / "strong", tmp_path / "weak", "--out", tmp_path / "r"])
    assert code == 2
    err = capsys.readouterr().err
    assert summary(tmp_path / "strong")["model_hash"] in err
    assert summary(tmp_path / "weak")["model_hash"] in err
