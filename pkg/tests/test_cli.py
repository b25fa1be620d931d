import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fedsched.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, fan_out, run, thread_cap
from fedsched.convergence import TrainingConstants, predict_global_epochs

CONSTANTS = dict(L=4.0, mu=1.0, G2=1.0, C1=20.0, sigma2=1.0, phi0=2.0, f0=20.0, lam=2.0)

SMALL = """
[system]
num_clients = 12
[clients.fleet]
num_clients = 12
var = 0.5
[constants]
L = 4.0
mu = 1.0
G2 = 1.0
C1 = 20.0
sigma2 = 1.0
phi0 = 2.0
f0 = 20.0
lam = 2.0
[predict]
K = [2, 5, 10]
E_l = [1, 5]
gamma = [0.0, 0.3]
[schedule]
K = 4
E_l = 3
rounds = 2
[optimize]
E_max = 30
[simulate]
K = 4
E_l = 3
eps = 0.05
max_epochs = 60
[simulate.task]
skew = 0.5
dim = 5
[sweep]
axis = "K"
values = [2, 5, 10]
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def write_cfg(tmp_path, text, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def invoke(cmd, config, out, *extra):
    return run([cmd, "--config", str(config), "--out", str(out), *extra])


# ---------------------------------------------------------------- every subcommand


@pytest.mark.parametrize("cmd,files", [
    ("predict", ["predict.csv"]),
    ("schedule", ["schedule.csv", "kkt.csv"]),
    ("optimize", ["recommendation.csv", "surface.csv"]),
    ("simulate", ["traces.csv", "per_seed.csv", "summary.csv"]),
    ("sweep", ["sweep.csv"]),
])
def test_subcommand_outputs_and_replay(tmp_path, cfg, cmd, files):
    out = tmp_path / "a"
    assert invoke(cmd, cfg, out, "--seed", "11", "--replicas", "3") == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == cmd and manifest["seed"] == 11
    assert sorted(manifest["outputs"]) == sorted(files)
    replay = tmp_path / "b"
    assert invoke(cmd, out / "manifest.json", replay) == EXIT_OK
    for name in files:
        assert (out / name).read_bytes() == (replay / name).read_bytes()
    assert json.loads((replay / "manifest.json").read_text())["sha256"] == manifest["sha256"]


def test_manifest_subcommand_mismatch(tmp_path, cfg):
    invoke("predict", cfg, tmp_path / "a")
    assert invoke("optimize", tmp_path / "a" / "manifest.json", tmp_path / "b") == EXIT_CONFIG


def test_seed_changes_stochastic_output(tmp_path, cfg):
    invoke("simulate", cfg, tmp_path / "a", "--seed", "1", "--replicas", "2")
    invoke("simulate", cfg, tmp_path / "b", "--seed", "2", "--replicas", "2")
    assert (tmp_path / "a" / "traces.csv").read_bytes() != (tmp_path / "b" / "traces.csv").read_bytes()


# ---------------------------------------------------------------- exit codes


def test_config_errors_exit_2(tmp_path, cfg, capsys):
    bad = write_cfg(tmp_path, SMALL.replace("[system]\n", "[system]\nloss_rate = 1.5\n"))
    assert invoke("predict", bad, tmp_path / "o") == EXIT_CONFIG
    assert "loss_rate" in capsys.readouterr().err
    assert invoke("predict", tmp_path / "missing.toml", tmp_path / "o") == EXIT_CONFIG
    unknown = write_cfg(tmp_path, SMALL.replace("[predict]\n", "[predict]\nfoo = 1\n"), "u.toml")
    assert invoke("predict", unknown, tmp_path / "o") == EXIT_CONFIG
    axis = write_cfg(tmp_path, SMALL.replace('axis = "K"', 'axis = "D"'), "x.toml")
    assert invoke("sweep", axis, tmp_path / "o") == EXIT_CONFIG
    assert invoke("predict", cfg, tmp_path / "o", "--replicas", "0") == EXIT_CONFIG


def test_divergence_exits_3(tmp_path, capsys):
    text = SMALL.replace("dim = 5", "dim = 60")
    text = text.replace("max_epochs = 60", "max_epochs = 30\nbatch_fraction = 0.001")
    assert invoke("simulate", write_cfg(tmp_path, text), tmp_path / "o", "--replicas", "2") == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_invalid_thread_cap(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv("FEDSCHED_THREADS", "zero")
    assert invoke("predict", cfg, tmp_path / "o") == EXIT_CONFIG
    monkeypatch.setenv("FEDSCHED_THREADS", "0")
    assert invoke("predict", cfg, tmp_path / "o") == EXIT_CONFIG


def test_thread_cap_and_fan_out(monkeypatch):
    monkeypatch.delenv("FEDSCHED_THREADS", raising=False)
    assert thread_cap() >= 1
    monkeypatch.setenv("FEDSCHED_THREADS", "3")
    assert thread_cap() == 3
    assert fan_out(abs, [-3, 2, -1]) == [3, 2, 1]


def test_threads_do_not_change_output(tmp_path, cfg):
    env = {**os.environ, "FEDSCHED_THREADS": "1"}
    base = [sys.executable, "-m", "fedsched.cli", "simulate", "--config", str(cfg), "--replicas", "4"]
    subprocess.run(base + ["--out", str(tmp_path / "one")], env=env, check=True)
    env["FEDSCHED_THREADS"] = "4"
    subprocess.run(base + ["--out", str(tmp_path / "four")], env=env, check=True)
    for name in ("traces.csv", "per_seed.csv", "summary.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "four" / name).read_bytes()


# ---------------------------------------------------------------- predict


def test_predict_single_point(tmp_path, cfg):
    text = SMALL.replace("K = [2, 5, 10]", "K = [7]").replace("E_l = [1, 5]", "E_l = [3]").replace(
        "gamma = [0.0, 0.3]", "gamma = [0.1]")
    invoke("predict", write_cfg(tmp_path, text), tmp_path / "o")
    rows = read_rows(tmp_path / "o" / "predict.csv")
    assert len(rows) == 1
    c = TrainingConstants(**CONSTANTS)
    assert float(rows[0]["G_eps"]) == predict_global_epochs(c, 1.0, 7, 3, 0.1, float(rows[0]["D"]))


def test_predict_table_matches_direct_calls(tmp_path, cfg):
    invoke("predict", cfg, tmp_path / "o")
    rows = read_rows(tmp_path / "o" / "predict.csv")
    assert len(rows) == 12
    c = TrainingConstants(**CONSTANTS)
    for r in rows:
        want = predict_global_epochs(c, float(r["eps"]), int(r["K"]), int(r["E_l"]), float(r["gamma"]),
                                     float(r["D"]))
        assert float(r["G_eps"]) == want
        assert int(r["G_eps_int"]) == int(np.ceil(want))


def test_predict_iid_constant_across_k(tmp_path):
    text = SMALL.replace("lam = 2.0", "lam = 1.0")
    invoke("predict", write_cfg(tmp_path, text), tmp_path / "o")
    rows = read_rows(tmp_path / "o" / "predict.csv")
    for e in ("1", "5"):
        assert len({r["G_eps"] for r in rows if r["E_l"] == e}) == 1


def test_constants_file_override(tmp_path, cfg):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**CONSTANTS, "lam": 1.0}))
    invoke("predict", cfg, tmp_path / "o", "--constants", str(path))
    rows = read_rows(tmp_path / "o" / "predict.csv")
    assert len({r["G_eps"] for r in rows if r["E_l"] == "1"}) == 1


# ---------------------------------------------------------------- schedule


def test_schedule_homogeneous_uniform_shares(tmp_path):
    text = SMALL.replace("var = 0.5", "var = 0.0\nrandom_gains = false").replace("K = 4\nE_l = 3\nrounds = 2",
                                                                                 "selected = [0, 3, 5, 7]\nE_l = 3")
    invoke("schedule", write_cfg(tmp_path, text), tmp_path / "o")
    rows = read_rows(tmp_path / "o" / "schedule.csv")
    assert [float(r["a_j"]) for r in rows] == [0.25] * 4


def test_schedule_centralized_not_worse(tmp_path, cfg):
    for policy in ("distributed", "centralized"):
        assert invoke("schedule", cfg, tmp_path / policy, "--policy", policy, "--seed", "4") == EXIT_OK
    dist = read_rows(tmp_path / "distributed" / "kkt.csv")
    cent = read_rows(tmp_path / "centralized" / "kkt.csv")
    for d, c in zip(dist, cent):
        assert float(c["coupled_objective"]) <= float(d["coupled_objective"]) * (1 + 1e-10)
        if c["any_clamped"] == "0":
            assert float(c["kkt_max_interior"]) <= 1e-6
        assert c["converged"] == "1"


def test_schedule_bad_selection(tmp_path):
    text = SMALL.replace("K = 4\nE_l = 3\nrounds = 2", "selected = [0, 99]")
    assert invoke("schedule", write_cfg(tmp_path, text), tmp_path / "o") == EXIT_CONFIG


# ---------------------------------------------------------------- optimize


def test_optimize_iid_advisory(tmp_path):
    invoke("optimize", write_cfg(tmp_path, SMALL.replace("lam = 2.0", "lam = 1.0")), tmp_path / "o")
    rec = read_rows(tmp_path / "o" / "recommendation.csv")[0]
    assert rec["K"] == "1" and rec["advisory"]


def test_optimize_upload_cost_scaling(tmp_path):
    base = SMALL.replace("E_max = 30", "E_max = 30\nupload_cost = 0.01\ncompute_cost = 0.5")
    invoke("optimize", write_cfg(tmp_path, base, "a.toml"), tmp_path / "a")
    invoke("optimize", write_cfg(tmp_path, base.replace("upload_cost = 0.01", "upload_cost = 0.02"), "b.toml"),
           tmp_path / "b")
    ka = float(read_rows(tmp_path / "a" / "recommendation.csv")[0]["K_real"])
    kb = float(read_rows(tmp_path / "b" / "recommendation.csv")[0]["K_real"])
    assert kb / ka == pytest.approx(2 ** -0.5, rel=1e-12)


def test_optimize_surface_argmin(tmp_path, cfg):
    invoke("optimize", cfg, tmp_path / "o")
    rec = read_rows(tmp_path / "o" / "recommendation.csv")[0]
    surf = read_rows(tmp_path / "o" / "surface.csv")
    assert len(surf) == 12 * 30
    best = min(surf, key=lambda r: float(r["total"]))
    assert (best["K"], best["E_l"]) == (rec["grid_K"], rec["grid_E_l"])


# ---------------------------------------------------------------- simulate


def test_simulate_summary_is_median_of_seeds(tmp_path, cfg):
    assert invoke("simulate", cfg, tmp_path / "o", "--replicas", "5") == EXIT_OK
    per_seed = read_rows(tmp_path / "o" / "per_seed.csv")
    summary = {r["metric"]: r["value"] for r in read_rows(tmp_path / "o" / "summary.csv")}
    reached = [int(r["G_eps"]) for r in per_seed if r["reached"] == "1"]
    assert int(summary["reached"]) == len(reached)
    assert int(summary["not_reached"]) == 5 - len(reached)
    assert float(summary["median_G_eps"]) == float(np.median(reached))
    traces = read_rows(tmp_path / "o" / "traces.csv")
    for r in per_seed:
        epochs = [int(t["epoch"]) for t in traces if t["seed"] == r["seed"]]
        assert epochs == list(range(1, int(r["epochs"]) + 1))


def test_simulate_reports_not_reached(tmp_path):
    text = SMALL.replace("eps = 0.05", "eps = 1e-9").replace("max_epochs = 60", "max_epochs = 5")
    invoke("simulate", write_cfg(tmp_path, text), tmp_path / "o", "--replicas", "2")
    summary = {r["metric"]: r["value"] for r in read_rows(tmp_path / "o" / "summary.csv")}
    assert summary["not_reached"] == "2" and summary["median_G_eps"] == ""


# ---------------------------------------------------------------- sweep


def test_sweep_k_matches_predict(tmp_path, cfg):
    text = SMALL.replace('values = [2, 5, 10]', 'values = [2, 5, 10]\nE_l = 5')
    invoke("sweep", write_cfg(tmp_path, text), tmp_path / "o")
    rows = [r for r in read_rows(tmp_path / "o" / "sweep.csv") if r["metric"] == "G_eps"]
    invoke("predict", write_cfg(tmp_path, SMALL.replace("E_l = [1, 5]", "E_l = [5]").replace(
        "gamma = [0.0, 0.3]", "gamma = [0.0]"), "p.toml"), tmp_path / "p")
    pred = read_rows(tmp_path / "p" / "predict.csv")
    assert [r["result"] for r in rows] == [r["G_eps"] for r in pred]


def test_sweep_cost_ratio_increasing(tmp_path):
    text = SMALL.replace('axis = "K"\nvalues = [2, 5, 10]', 'axis = "cost_ratio"\nvalues = [1, 4, 16, 64, 256]')
    invoke("sweep", write_cfg(tmp_path, text), tmp_path / "o")
    ks = [float(r["result"]) for r in read_rows(tmp_path / "o" / "sweep.csv") if r["metric"] == "K_star_real"]
    assert np.all(np.diff(ks) > 0)
    assert ks[1] / ks[0] == pytest.approx(2.0, rel=1e-12)


def test_sweep_var_simulated(tmp_path):
    text = SMALL.replace('axis = "K"\nvalues = [2, 5, 10]', 'axis = "Var"\nvalues = [0.0, 0.5]\nmode = "simulated"\n'
                                                             'epochs = 20')
    assert invoke("sweep", write_cfg(tmp_path, text), tmp_path / "o", "--replicas", "3") == EXIT_OK
    rows = read_rows(tmp_path / "o" / "sweep.csv")
    by = {(r["value"], r["replicate"], r["metric"]): float(r["result"]) for r in rows}
    for rep in "012":
        assert by[("0.0", rep, "mean_cost_distributed")] == pytest.approx(by[("0.0", rep, "mean_cost_even")],
                                                                          rel=1e-12)
        assert by[("0.5", rep, "mean_cost_distributed")] <= by[("0.5", rep, "mean_cost_even")]


def test_sweep_simulated_k(tmp_path):
    text = SMALL.replace('values = [2, 5, 10]', 'values = [2, 10]\nmode = "simulated"')
    assert invoke("sweep", write_cfg(tmp_path, text), tmp_path / "o", "--replicas", "2") == EXIT_OK
    rows = read_rows(tmp_path / "o" / "sweep.csv")
    assert [(r["value"], r["replicate"]) for r in rows] == [("2", "0"), ("2", "1"), ("10", "0"), ("10", "1")]


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "fedsched.cli", "--version"], capture_output=True, text=True)
    assert out.stdout.startswith("fedsched ")
    assert Path(sys.executable).exists()
