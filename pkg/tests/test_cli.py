import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from zsmg.cli import main
from zsmg.exact import MAX, MIN, best_response_markov, nash_backward_induction
from zsmg.experiment import REPORT_SCHEMA, ExperimentConfig, dump_report_schema, log_grid, worker_count
from zsmg.game import MarkovGame, validate_game

SCHEMA_FILE = Path(__file__).resolve().parents[1] / "schemas" / "report.schema.json"


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_builtin(tmp_path):
    out = tmp_path / "mp.json"
    assert run("gen", "--builtin", "matching_pennies", "-o", out) == 0
    assert validate_game(MarkovGame.load(out)) == []


def test_gen_random_deterministic(tmp_path):
    for name in ("a.json", "b.json"):
        assert run("gen", "--random", "seed=7", "S=3", "A=2", "B=2", "H=3", "-o", tmp_path / name) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_gen_usage_errors(tmp_path, capsys):
    assert run("gen", "--random", "seed=7", "S=0", "A=2", "B=2", "H=3") == 2
    assert run("gen", "--random", "seed=7", "S") == 2
    assert run("gen") == 2
    assert "usage" in capsys.readouterr().err


def _train(tmp_path, name, *extra):
    out = tmp_path / name
    code = run("train", "--builtin", "matching_pennies_chain(2)", "--K", 200, "--seeds", 0, 1, "-o", out, *extra)
    assert code == 0
    return out


def test_train_deterministic_and_manifest(tmp_path, capsys):
    a = _train(tmp_path, "a")
    b = _train(tmp_path, "b", "--workers", 2)
    for seed in (0, 1):
        assert (a / f"seed_{seed}" / "metrics.csv").read_bytes() == (b / f"seed_{seed}" / "metrics.csv").read_bytes()
        for name in ("episode_log.npz", "learner.npz", "manifest.json", "game.json"):
            assert (a / f"seed_{seed}" / name).exists()
    man = json.loads((a / "manifest.json").read_text())
    assert man["algo"] == "full" and len(man["game_hash"]) == 64
    assert all(r["config_hash"] == man["config_hash"] for r in man["runs"])
    out = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(out)["config_hash"] == man["config_hash"]


def test_train_baseline_recorded(tmp_path):
    out = _train(tmp_path, "base", "--algo", "baseline")
    assert json.loads((out / "seed_0" / "manifest.json").read_text())["algo"] == "baseline"
    full = _train(tmp_path, "full")
    assert json.loads((out / "manifest.json").read_text())["config_hash"] != json.loads(
        (full / "manifest.json").read_text())["config_hash"]


def test_train_config_file_and_overrides(tmp_path):
    cfg = {"version": 1, "game": {"random": {"seed": 3, "S": 2, "A": 2, "B": 2, "H": 2}}, "K": 50,
           "seeds": [4], "hyperparams": {"delta": 0.2}, "output_dir": str(tmp_path / "fromfile")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run("train", "--config", path, "--K", 60, "--set", "N0=30") == 0
    saved = json.loads((tmp_path / "fromfile" / "config.json").read_text())
    assert saved["K"] == 60 and saved["hyperparams"]["N0"] == 30 and saved["hyperparams"]["delta"] == 0.2


@pytest.mark.parametrize("cfg", [
    {"version": 1, "game": {"builtin": "matching_pennies"}, "seeds": []},
    {"version": 1, "game": {"builtin": "matching_pennies"}, "K": 0},
    {"version": 2, "game": {"builtin": "matching_pennies"}},
    {"version": 1, "game": {"file": "/nonexistent/game.json"}},
    {"version": 1, "game": {"builtin": "matching_pennies"}, "hyperparams": {"delta": 2.0}},
    {"version": 1, "game": {"builtin": "matching_pennies"}, "hyperparams": {"gamma": 1.0}},
])
def test_train_rejects_bad_config(tmp_path, cfg):
    cfg.setdefault("output_dir", str(tmp_path / "x"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run("train", "--config", path) == 3


def test_eval_report_and_convergence(tmp_path):
    out = _train(tmp_path, "run")
    assert run("eval", out, "--mc-episodes", 200) == 0
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert json.loads(SCHEMA_FILE.read_text()) == REPORT_SCHEMA == json.loads(dump_report_schema())
    assert len(report["mc_estimates"]) == 4
    with open(out / "convergence.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["K"]) for r in rows if r["seed"] == "0"] == log_grid(200)
    # gap-bound column recomputed straight from the metrics file
    with open(out / "seed_0" / "metrics.csv") as f:
        gaps = [float(r["vbar1"]) - float(r["vlow1"]) for r in csv.DictReader(f)]
    for r in rows:
        if r["seed"] == "0":
            assert float(r["gap_bound"]) == pytest.approx(np.mean(gaps[: int(r["K"])]), abs=1e-12)


def test_eval_k1_matches_markov(tmp_path):
    out = tmp_path / "k1"
    assert run("train", "--builtin", "matching_pennies_chain(2)", "--K", 1, "--seeds", 0, "-o", out) == 0
    assert run("eval", out) == 0
    report = json.loads((out / "report.json").read_text())
    g = MarkovGame.load(out / "game.json")
    ex = nash_backward_induction(g)
    mu = np.full((g.H, g.S, 2), 0.5)
    assert report["exploitability_upper_max"] == pytest.approx(ex.value(g) - best_response_markov(g, mu, MIN)[0],
                                                               abs=1e-12)
    assert report["exploitability_upper_min"] == pytest.approx(best_response_markov(g, mu, MAX)[0] - ex.value(g),
                                                               abs=1e-12)


def test_eval_refuses_mismatch_and_missing(tmp_path):
    out = _train(tmp_path, "run")
    other = tmp_path / "mp.json"
    run("gen", "--builtin", "matching_pennies", "-o", other)
    assert run("eval", out, "--game", other) == 3
    (out / "seed_1" / "episode_log.npz").unlink()
    assert run("eval", out) == 4
    assert run("eval", tmp_path / "nowhere") == 4


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("ZSMG_THREADS", "1")
    assert worker_count(8) == 1
    monkeypatch.delenv("ZSMG_THREADS")
    assert worker_count(3) == 3


def test_config_hash_ignores_output_dir():
    a = ExperimentConfig(game={"builtin": "matching_pennies"}, output_dir="x")
    b = ExperimentConfig(game={"builtin": "matching_pennies"}, output_dir="y")
    assert a.config_hash() == b.config_hash()


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "zsmg", "gen", "--builtin", "matching_pennies"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["H"] == 1
