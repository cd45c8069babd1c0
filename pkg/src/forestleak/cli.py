"""Command-line entry point: train, attack, evaluate, sweep, pmf-dump, noise-compare."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from .dataset import BinaryDataset
from .evaluation import EvaluationReport, evaluate_reconstruction
from .experiment import (
    RECORD_FIELDS,
    ExperimentConfig,
    _append_csv,
    attack_stage,
    format_epsilon,
    output_root,
    parse_epsilon,
    run_sweep,
    training_set,
    write_train_artifacts,
)
from .forest import Forest, accuracy, noise_comparison_table, train_dp_forest
from .noise import pmf_table
from .reconstruction import InfeasibleProblem, SearchSpaceTooLarge
from .reconstruction.solution import load_solution_dataset, save_solution, save_trace

logger = logging.getLogger("forestleak")


def _dataset_block(args) -> dict:
    if args.csv:
        block = {"csv": args.csv, "label_column": args.label_column}
        if args.encoding:
            block["group_spec"] = json.loads(Path(args.encoding).read_text())
        return block
    if args.synthetic:
        return {"synthetic": json.loads(args.synthetic)}
    return {"name": args.dataset}


def cmd_train(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        block, n, seed = cfg.dataset, cfg.n_train[0], cfg.seeds[0]
        trees, depth, eps = cfg.num_trees[0], cfg.depth[0], cfg.epsilon[0]
    else:
        block, n, seed = _dataset_block(args), args.n, args.seed
        trees, depth, eps = args.trees, args.depth, parse_epsilon(args.epsilon)
    out = output_root(args.out) if args.out else output_root() / "train"
    train = training_set(block, n, seed)
    forest = train_dp_forest(train, trees, depth, "inf" if math.isinf(eps) else eps, seed)
    write_train_artifacts(forest, train, out)
    meta = {
        "num_trees": trees, "depth": depth, "epsilon_total": format_epsilon(eps),
        "epsilon_per_leaf": "inf" if forest.infinite_budget else float(forest.epsilon_per_leaf),
        "n_train": train.n, "seed": seed, "accuracy_train": accuracy(forest, train),
    }
    if train.heldout is not None and train.heldout.n:
        meta["accuracy_test"] = accuracy(forest, train.heldout)
    (out / "train_meta.json").write_text(json.dumps(meta, indent=1))
    print(json.dumps(meta))
    return 0


def cmd_attack(args) -> int:
    forest = Forest.load_json(args.forest).attacker_view()
    threat = args.threat.replace("-", "_")
    known_cols = None
    known_rows = None
    if args.known_columns:
        threat = "partial"
        data = json.loads(Path(args.known_columns).read_text())
        known_cols = {int(k): v for k, v in data.items()}
    if args.informed:
        threat = "informed"
        known_rows = BinaryDataset.load_json(args.informed)
    n = args.n
    if threat == "informed" and n is None:
        n = known_rows.n + 1
    if threat in ("full", "partial") and n is None:
        if known_cols:
            n = len(next(iter(known_cols.values())))
        else:
            print("error: --n is required unless --threat unknown-n", file=sys.stderr)
            return 2
    out = output_root(args.out) if args.out else output_root() / "attack"
    out.mkdir(parents=True, exist_ok=True)
    try:
        problem, sol = attack_stage(
            forest, threat, n=None if threat == "unknown_n" else n, time_budget=args.time_budget,
            seed=args.seed, threads=args.threads, exact=args.exact, max_moves=args.max_moves,
            known_columns=known_cols, known_rows=known_rows, alpha=args.alpha,
        )
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except SearchSpaceTooLarge as exc:
        print(f"exact search refused: {exc}", file=sys.stderr)
        return 4
    save_solution(sol, problem, out / "solution.json")
    save_trace(sol.trace, out / "trace.csv")
    summary = {"objective": sol.objective, "hard_feasible": sol.hard_feasible, "n_reconstructed": sol.n,
               "n_min": problem.n_min, "n_max": problem.n_max, "threat_model": threat}
    print(json.dumps(summary))
    if not sol.hard_feasible:
        print("warning: budget exhausted without a hard-feasible reconstruction", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    private = Path(args.private)
    train = BinaryDataset.load_json(private / "train.json")
    heldout = BinaryDataset.load_json(private / "heldout.json") if (private / "heldout.json").exists() else None
    rec, meta = load_solution_dataset(args.solution)
    if rec.m != train.m:
        print(f"error: solution has {rec.m} attributes, training set {train.m}", file=sys.stderr)
        return 2
    if meta.get("threat_model") == "informed":
        print("error: informed solutions are scored per target; use the sweep's informed mode", file=sys.stderr)
        return 2
    rec = train.with_rows(rec.rows, rec.labels)
    report: EvaluationReport = evaluate_reconstruction(
        rec, train, seed=args.seed, baseline_runs=args.baseline_runs, leak_samples=args.leak_samples,
        heldout_pool=heldout,
    )
    forest_path = private / "forest_private.json"
    if forest_path.exists():
        forest = Forest.load_json(forest_path)
        report.accuracy_train = accuracy(forest, train)
        if heldout is not None and heldout.n:
            report.accuracy_test = accuracy(forest, heldout)
    out = Path(args.out) if args.out else Path(args.solution).with_name("report.json")
    report.save_json(out)
    if args.results_csv:
        meta_path = private / "train_meta.json"
        tm = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        row = {k: None for k in RECORD_FIELDS}
        row.update({
            "dataset": args.dataset_name, "num_trees": tm.get("num_trees"), "depth": tm.get("depth"),
            "epsilon": tm.get("epsilon_total"), "n_train": train.n, "seed": tm.get("seed"),
            "threat_model": meta.get("threat_model"), "status": "ok",
            "reconstruction_error": report.reconstruction_error,
            "random_baseline_error": report.random_baseline_error, "objective": meta.get("objective"),
            "hard_feasible": meta.get("hard_feasible"), "time_to_first_feasible": meta.get("time_to_first_feasible"),
            "accuracy_train": report.accuracy_train, "accuracy_test": report.accuracy_test,
            "privacy_leak_cdf": report.privacy_leak_cdf, "proportion_perfect": report.proportion_perfect,
            "worst_individual_error": report.worst_individual_error, "n_reconstructed": report.n_reconstructed,
        })
        _append_csv(Path(args.results_csv), row)
    print(json.dumps({"reconstruction_error": report.reconstruction_error,
                      "random_baseline_error": report.random_baseline_error,
                      "privacy_leak_cdf": report.privacy_leak_cdf}))
    return 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.time_budget is not None:
        cfg.time_budget = args.time_budget
    root = output_root(args.out or cfg.output_dir)
    records = run_sweep(cfg, root, workers=args.workers)
    failed = sum(r["status"] != "ok" for r in records)
    print(json.dumps({"records": len(records), "failed": failed, "results": str(root / "results.csv"),
                      "summary": str(root / "summary.csv")}))
    return 0


def _emit_csv(rows: list[dict], out: str | None) -> None:
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    finally:
        if out:
            fh.close()


def cmd_pmf_dump(args) -> int:
    rows = [{"l": l, "p": p, "log_p": lp} for l, p, lp in pmf_table(parse_epsilon(args.epsilon_v), args.gamma)]
    _emit_csv(rows, args.out)
    return 0


def cmd_noise_compare(args) -> int:
    rows = noise_comparison_table(args.epsilon, args.delta, args.trees)
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        _emit_csv(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forestleak", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="sample a training set and train a private forest")
    t.add_argument("--config", help="experiment JSON; first grid point is used")
    t.add_argument("--dataset", default="compas", help="bundled dataset name")
    t.add_argument("--csv", help="CSV file instead of a bundled dataset")
    t.add_argument("--label-column", default="label")
    t.add_argument("--encoding", help="JSON column-encoding file for --csv")
    t.add_argument("--synthetic", help="JSON generator parameters, e.g. '{\"m_features\": 8, \"n_rows\": 30}'")
    t.add_argument("--n", type=int, default=100)
    t.add_argument("--trees", type=int, default=5)
    t.add_argument("--depth", type=int, default=5)
    t.add_argument("--epsilon", default="1", help="total budget, or 'inf'")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="reconstruct the training set from an attacker-view forest")
    a.add_argument("forest")
    a.add_argument("--threat", default="full", choices=["full", "unknown-n", "partial", "informed"])
    a.add_argument("--n", type=int)
    a.add_argument("--known-columns", help="JSON {attribute index: [value per row]}")
    a.add_argument("--informed", help="dataset JSON of the rows the adversary knows")
    a.add_argument("--alpha", type=float)
    a.add_argument("--time-budget", type=float, default=120.0)
    a.add_argument("--max-moves", type=int)
    a.add_argument("--threads", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--exact", action="store_true", help="exhaustive search (tiny instances only)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("evaluate", help="score a solution against the private training set")
    e.add_argument("--solution", required=True)
    e.add_argument("--private", required=True, help="directory written by 'train'")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--baseline-runs", type=int, default=100)
    e.add_argument("--leak-samples", type=int, default=100)
    e.add_argument("--results-csv", help="append one batch row to this CSV")
    e.add_argument("--dataset-name", default="")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run a grid of experiments from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int)
    s.add_argument("--time-budget", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("pmf-dump", help="noise pmf table as CSV")
    d.add_argument("--epsilon-v", required=True)
    d.add_argument("--gamma", type=int)
    d.add_argument("--out")
    d.set_defaults(func=cmd_pmf_dump)

    n = sub.add_parser("noise-compare", help="Laplace vs Gaussian noise scales")
    n.add_argument("--trees", type=int, default=10)
    n.add_argument("--epsilon", type=float, default=10.0)
    n.add_argument("--delta", type=float, default=1e-4)
    n.add_argument("--json", action="store_true")
    n.add_argument("--out")
    n.set_defaults(func=cmd_noise_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
