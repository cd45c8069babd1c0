from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from forestleak.cli import main
from forestleak.experiment import ExperimentConfig, cell_seed, output_root, run_sweep, summarize

SYNTH = {"m_features": 6, "n_rows": 200, "seed": 1}


def _sweep_config(tmp_path, **extra):
    cfg = {
        "dataset": {"synthetic": SYNTH},
        "grid": {"num_trees": [2, 3], "depth": [2, 3], "epsilon": [1, "inf"], "n_train": [15]},
        "seeds": [0, 1],
        "solver": {"time_budget": 5, "max_moves": 3000},
        "evaluation": {"baseline_runs": 3, "leak_samples": 5},
    }
    cfg.update(extra)
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    return path


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_attack_evaluate(tmp_path, capsys):
    train_dir = tmp_path / "train"
    assert main(["train", "--synthetic", json.dumps(SYNTH), "--n", "12", "--trees", "2", "--depth", "2",
                 "--epsilon", "2", "--seed", "3", "--out", str(train_dir)]) == 0
    meta = json.loads(capsys.readouterr().out)
    assert meta["n_train"] == 12 and meta["epsilon_per_leaf"] == 1.0
    for name in ("forest_attacker.json", "forest_private.json", "train.json", "heldout.json"):
        assert (train_dir / name).exists()
    attacker = json.loads((train_dir / "forest_attacker.json").read_text())
    assert "true_counts" not in json.dumps(attacker) and "n_train_true" not in attacker

    att = tmp_path / "attack"
    assert main(["attack", str(train_dir / "forest_attacker.json"), "--n", "12", "--time-budget", "2",
                 "--max-moves", "2000", "--out", str(att)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n_reconstructed"] == 12
    assert (att / "solution.json").exists() and (att / "trace.csv").exists()

    results = tmp_path / "results.csv"
    assert main(["evaluate", "--solution", str(att / "solution.json"), "--private", str(train_dir),
                 "--baseline-runs", "3", "--leak-samples", "5", "--results-csv", str(results)]) == 0
    rep = json.loads((att / "report.json").read_text())
    assert 0.0 <= rep["reconstruction_error"] <= 1.0
    rows = _read_csv(results)
    assert len(rows) == 1 and rows[0]["epsilon"] == "2"


def test_attack_requires_n(tmp_path, capsys):
    d = tmp_path / "t"
    main(["train", "--synthetic", json.dumps(SYNTH), "--n", "8", "--trees", "2", "--depth", "2", "--out", str(d)])
    capsys.readouterr()
    assert main(["attack", str(d / "forest_attacker.json"), "--out", str(tmp_path / "a")]) == 2


def test_attack_unknown_n_and_exact(tmp_path, capsys):
    d = tmp_path / "t"
    main(["train", "--synthetic", json.dumps({"m_features": 3, "n_rows": 50}), "--n", "3", "--trees", "2",
          "--depth", "2", "--epsilon", "inf", "--out", str(d)])
    capsys.readouterr()
    assert main(["attack", str(d / "forest_attacker.json"), "--threat", "unknown-n", "--exact",
                 "--out", str(tmp_path / "a")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["n_min"] == out["n_max"] == out["n_reconstructed"] == 3
    assert out["hard_feasible"]


def test_attack_exact_refuses_large(tmp_path, capsys):
    d = tmp_path / "t"
    main(["train", "--synthetic", json.dumps({"m_features": 12, "n_rows": 200}), "--n", "50", "--trees", "2",
          "--depth", "3", "--out", str(d)])
    capsys.readouterr()
    assert main(["attack", str(d / "forest_attacker.json"), "--n", "50", "--exact",
                 "--out", str(tmp_path / "a")]) == 4


def test_pmf_dump_and_noise_compare(tmp_path, capsys):
    assert main(["pmf-dump", "--epsilon-v", "1"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 25 and rows[12]["l"] == "0"
    assert float(rows[12]["p"]) == pytest.approx(1 - math.exp(-1))
    assert main(["noise-compare", "--json"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert [r["composition"] for r in table] == ["basic", "advanced"]
    assert table[0]["gaussian_sigma"] == pytest.approx(4.8448, abs=1e-4)


def test_sweep_grid_resume_and_summary(tmp_path, capsys):
    cfg_path = _sweep_config(tmp_path)
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg_path), "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["records"] == 16 and res["failed"] == 0
    rows = _read_csv(out / "results.csv")
    assert len(rows) == 16
    assert len({(r["num_trees"], r["depth"], r["epsilon"], r["seed"]) for r in rows}) == 16
    # second run reuses every cell record
    main(["sweep", "--config", str(cfg_path), "--out", str(out)])
    capsys.readouterr()
    assert len(_read_csv(out / "results.csv")) == 16

    summary = _read_csv(out / "summary.csv")
    assert len(summary) == 8
    for srow in summary:
        errs = [float(r["reconstruction_error"]) for r in rows
                if (r["num_trees"], r["depth"], r["epsilon"]) == (srow["num_trees"], srow["depth"], srow["epsilon"])]
        assert len(errs) == 2
        assert float(srow["reconstruction_error_mean"]) == pytest.approx(np.mean(errs))
        assert float(srow["reconstruction_error_std"]) == pytest.approx(np.std(errs, ddof=1))


def test_sweep_is_deterministic(tmp_path):
    cfg = ExperimentConfig.load(_sweep_config(tmp_path))
    cfg.num_trees, cfg.depth, cfg.seeds = [2], [2], [0]
    a = run_sweep(cfg, tmp_path / "a")
    b = run_sweep(cfg, tmp_path / "b")
    key = lambda r: (r["epsilon"], r["seed"])
    for ra, rb in zip(sorted(a, key=key), sorted(b, key=key)):
        assert ra["reconstruction_error"] == rb["reconstruction_error"]
        assert ra["accuracy_train"] == rb["accuracy_train"]


def test_same_sample_across_budgets(tmp_path):
    cfg = ExperimentConfig.load(_sweep_config(tmp_path))
    cfg.num_trees, cfg.depth, cfg.seeds = [2], [2], [0]
    run_sweep(cfg, tmp_path / "s")
    trains = [json.loads(p.read_text()) for p in sorted((tmp_path / "s" / "cells").glob("*/train.json"))]
    assert len(trains) == 2 and trains[0]["rows"] == trains[1]["rows"]


def test_output_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("FORESTLEAK_OUTPUT", str(tmp_path / "env"))
    assert output_root() == tmp_path / "env"
    assert output_root(tmp_path / "x") == tmp_path / "x"


def test_cell_seed_stable():
    assert cell_seed(0, "a", 1) == cell_seed(0, "a", 1)
    assert cell_seed(0, "a", 1) != cell_seed(0, "a", 2)


def test_summarize_skips_failures():
    recs = [
        {"dataset": "d", "threat_model": "full", "n_train": 5, "num_trees": 1, "depth": 1, "epsilon": "1",
         "status": "ok", "reconstruction_error": 0.2},
        {"dataset": "d", "threat_model": "full", "n_train": 5, "num_trees": 1, "depth": 1, "epsilon": "1",
         "status": "error", "reconstruction_error": None},
    ]
    s = summarize(recs)
    assert s[0]["runs"] == 1 and s[0]["reconstruction_error_std"] == 0.0
