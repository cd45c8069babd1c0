"""Train -> attack -> evaluate pipeline and grid sweeps with resumable, seeded cells."""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .dataset import BinaryDataset, DatasetSpec, generate_synthetic, load_builtin, load_csv, sample_training_set
from .evaluation import evaluate_reconstruction, majority_baseline, per_example_error
from .forest import Forest, accuracy, train_dp_forest
from .reconstruction import (
    AnnealingConfig,
    ExactLimits,
    SearchSpaceTooLarge,
    build_problem,
    extract_reconstruction,
    free_rows,
    search_space_size,
    solve_anytime,
    solve_exact,
)
from .reconstruction.solution import save_solution, save_trace

logger = logging.getLogger(__name__)

OUTPUT_ENV = "FORESTLEAK_OUTPUT"
DEFAULT_TIME_BUDGET = 120.0
RECORD_FIELDS = [
    "dataset", "num_trees", "depth", "epsilon", "n_train", "seed", "threat_model", "status",
    "reconstruction_error", "random_baseline_error", "majority_baseline_error", "objective", "hard_feasible",
    "time_to_first_feasible", "wall_time", "accuracy_train", "accuracy_test", "privacy_leak_cdf",
    "proportion_perfect", "worst_individual_error", "n_reconstructed", "error_message",
]
METRICS = [
    "reconstruction_error", "random_baseline_error", "majority_baseline_error", "objective",
    "time_to_first_feasible", "wall_time", "accuracy_train", "accuracy_test", "privacy_leak_cdf",
    "proportion_perfect", "worst_individual_error",
]


def output_root(explicit: str | Path | None = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ENV, "forestleak-output"))


def parse_epsilon(value: Any) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity"):
        return math.inf
    eps = float(value)
    if not eps > 0:
        raise ValueError(f"epsilon must be positive or 'inf', got {value!r}")
    return eps


def format_epsilon(eps: float) -> str:
    return "inf" if math.isinf(eps) else f"{eps:g}"


def cell_seed(*coords: Any) -> int:
    """64-bit seed from a hash of the coordinates, so new cells never shift existing ones."""
    text = "|".join(str(c) for c in coords)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Parsed sweep configuration (JSON on disk)."""

    dataset: Mapping[str, Any]
    num_trees: list[int]
    depth: list[int]
    epsilon: list[float]
    n_train: list[int]
    seeds: list[int]
    threat_model: str = "full"
    threat: Mapping[str, Any] = field(default_factory=dict)
    time_budget: float = DEFAULT_TIME_BUDGET
    threads: int = 1
    exact: bool = False
    max_moves: int | None = None
    baseline_runs: int = 100
    leak_samples: int = 100
    master_seed: int = 0
    workers: int = 1
    output_dir: str | None = None

    def __post_init__(self) -> None:
        for name in ("num_trees", "depth", "epsilon", "n_train", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name!r} must not be empty")
        if self.time_budget <= 0 or self.threads < 1 or self.workers < 1:
            raise ValueError("budgets and worker counts must be positive")
        self.epsilon = [parse_epsilon(e) for e in self.epsilon]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        grid = data.get("grid", {})
        solver = data.get("solver", {})
        ev = data.get("evaluation", {})
        ds = data["dataset"]
        n_train = grid.get("n_train", [ds.get("n_train", 100)] if isinstance(ds, Mapping) else [100])
        return cls(
            dataset=ds if isinstance(ds, Mapping) else {"name": ds},
            num_trees=list(grid.get("num_trees", [5])),
            depth=list(grid.get("depth", [5])),
            epsilon=list(grid.get("epsilon", [1.0])),
            n_train=list(n_train),
            seeds=list(data.get("seeds", [0])),
            threat_model=data.get("threat_model", "full"),
            threat=data.get("threat", {}),
            time_budget=float(solver.get("time_budget", DEFAULT_TIME_BUDGET)),
            threads=int(solver.get("threads", 1)),
            exact=bool(solver.get("exact", False)),
            max_moves=solver.get("max_moves"),
            baseline_runs=int(ev.get("baseline_runs", 100)),
            leak_samples=int(ev.get("leak_samples", 100)),
            master_seed=int(data.get("master_seed", 0)),
            workers=int(data.get("workers", 1)),
            output_dir=data.get("output_dir"),
        )

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def dataset_name(self) -> str:
        d = self.dataset
        if "name" in d:
            return str(d["name"])
        if "csv" in d:
            return Path(d["csv"]).stem
        return "synthetic"

    def cells(self) -> list[dict[str, Any]]:
        out = []
        for n, t, d, e, s in product(self.n_train, self.num_trees, self.depth, self.epsilon, self.seeds):
            out.append({"dataset": self.dataset_name, "num_trees": int(t), "depth": int(d), "epsilon": e,
                        "n_train": int(n), "seed": int(s)})
        return out


def load_source(spec: Mapping[str, Any]) -> BinaryDataset:
    """Resolve a dataset block: {"name": bundled} | {"csv": path, ...} | {"synthetic": {...}}."""
    if "name" in spec:
        return load_builtin(spec["name"])
    if "csv" in spec:
        return load_csv(spec["csv"], spec["label_column"], spec.get("group_spec"),
                        label_values=spec.get("label_values"), usecols=spec.get("usecols"))
    if "synthetic" in spec:
        p = dict(spec["synthetic"])
        return generate_synthetic(
            int(p["m_features"]), int(p["n_rows"]), float(p.get("class_balance", 0.5)),
            tuple(p.get("group_layout", ())), int(p.get("seed", 0)), separable=bool(p.get("separable", False)),
        )
    raise ValueError(f"cannot resolve dataset block {dict(spec)!r}")


def training_set(spec: Mapping[str, Any], n: int, seed: int, master_seed: int = 0) -> BinaryDataset:
    source = load_source(spec)
    ds_spec = DatasetSpec(source=dict(spec), n_train=n, seed=seed)
    return sample_training_set(source, ds_spec.n_train, cell_seed(master_seed, "sample", n, seed))


# ------------------------------------------------------------------- stages


def train_stage(train: BinaryDataset, num_trees: int, depth: int, epsilon: float, seed: int,
                out_dir: Path | None = None) -> Forest:
    forest = train_dp_forest(train, num_trees, depth, "inf" if math.isinf(epsilon) else epsilon, seed)
    if out_dir is not None:
        write_train_artifacts(forest, train, out_dir)
    return forest


def write_train_artifacts(forest: Forest, train: BinaryDataset, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    forest.save_json(out_dir / "forest_attacker.json", include_true=False)
    forest.save_json(out_dir / "forest_private.json", include_true=True)
    train.save_json(out_dir / "train.json")
    if train.heldout is not None:
        train.heldout.save_json(out_dir / "heldout.json")


def attack_stage(
    forest_view: Forest,
    threat_model: str,
    *,
    n: int | None,
    time_budget: float,
    seed: int,
    threads: int = 1,
    exact: bool = False,
    max_moves: int | None = None,
    known_columns: Mapping[int, Sequence[int]] | None = None,
    known_rows: BinaryDataset | None = None,
    alpha: float | None = None,
):
    problem = build_problem(
        forest_view, threat_model, n=n, known_columns=known_columns, known_rows=known_rows, alpha=alpha
    )
    if exact:
        solution = solve_exact(problem, ExactLimits(time_limit=time_budget))
    else:
        solution = solve_anytime(problem, time_budget, seed=seed, threads=threads, max_moves=max_moves)
    return problem, solution


def informed_stage(forest: Forest, train: BinaryDataset, targets: Sequence[int], *, time_budget: float,
                   seed: int, alpha: float | None = None) -> dict[str, Any]:
    """Reconstruct each target row with every other training row known."""
    view = forest.attacker_view()
    ours, base = [], []
    for j, target in enumerate(targets):
        keep = np.array([k for k in range(train.n) if k != target])
        known = train.subset(keep)
        problem = build_problem(view, "informed", n=train.n, known_rows=known, alpha=alpha)
        try:
            search_space_size(problem, problem.n_min)
            sol = solve_exact(problem, ExactLimits(time_limit=time_budget))
        except SearchSpaceTooLarge:
            sol = solve_anytime(problem, time_budget, seed=cell_seed(seed, "informed", j))
        rows, _ = free_rows(sol)
        ours.append(per_example_error(rows[0], train.rows[target]))
        base.append(per_example_error(majority_baseline(known), train.rows[target]))
    return {"informed_errors": ours, "majority_errors": base}


# --------------------------------------------------------------------- cells


def _cell_id(cell: Mapping[str, Any], threat_model: str) -> str:
    return (f"{cell['dataset']}_{threat_model}_N{cell['n_train']}_T{cell['num_trees']}_d{cell['depth']}"
            f"_eps{format_epsilon(cell['epsilon'])}_s{cell['seed']}")


def run_cell(cfg: ExperimentConfig, cell: Mapping[str, Any], root: Path) -> dict[str, Any]:
    cid = _cell_id(cell, cfg.threat_model)
    cdir = root / "cells" / cid
    record_path = cdir / "record.json"
    if record_path.exists():
        return json.loads(record_path.read_text())
    cdir.mkdir(parents=True, exist_ok=True)
    rec: dict[str, Any] = {k: None for k in RECORD_FIELDS}
    rec.update(cell)
    rec["epsilon"] = format_epsilon(cell["epsilon"])
    rec["threat_model"] = cfg.threat_model
    start = time.perf_counter()
    coords = (cfg.master_seed, cell["dataset"], cell["n_train"], cell["num_trees"], cell["depth"],
              format_epsilon(cell["epsilon"]), cell["seed"])
    try:
        train = training_set(cfg.dataset, cell["n_train"], cell["seed"], cfg.master_seed)
        forest = train_stage(train, cell["num_trees"], cell["depth"], cell["epsilon"],
                             cell_seed(*coords, "forest"), cdir)
        rec["accuracy_train"] = accuracy(forest, train)
        if train.heldout is not None and train.heldout.n:
            rec["accuracy_test"] = accuracy(forest, train.heldout)
        solver_seed = cell_seed(*coords, "solver")
        if cfg.threat_model == "informed":
            n_targets = int(cfg.threat.get("targets", 30))
            rng = np.random.default_rng(cell_seed(*coords, "targets"))
            targets = sorted(rng.choice(train.n, size=min(n_targets, train.n), replace=False).tolist())
            res = informed_stage(forest, train, targets, time_budget=cfg.time_budget, seed=solver_seed,
                                 alpha=cfg.threat.get("alpha"))
            rec["reconstruction_error"] = float(np.mean(res["informed_errors"]))
            rec["majority_baseline_error"] = float(np.mean(res["majority_errors"]))
            (cdir / "informed.json").write_text(json.dumps({"targets": targets, **res}))
        else:
            known_cols = None
            if cfg.threat_model == "partial":
                known_cols = {int(a): train.rows[:, int(a)].tolist() for a in cfg.threat["known_columns"]}
            n = None if cfg.threat_model == "unknown_n" else train.n
            problem, sol = attack_stage(
                forest.attacker_view(), cfg.threat_model, n=n, time_budget=cfg.time_budget, seed=solver_seed,
                threads=cfg.threads, exact=cfg.exact, max_moves=cfg.max_moves, known_columns=known_cols,
            )
            save_solution(sol, problem, cdir / "solution.json")
            save_trace(sol.trace, cdir / "trace.csv")
            rec_ds = extract_reconstruction(sol, train)
            report = evaluate_reconstruction(rec_ds, train, seed=solver_seed % (2**32),
                                             baseline_runs=cfg.baseline_runs, leak_samples=cfg.leak_samples)
            report.accuracy_train = rec["accuracy_train"]
            report.accuracy_test = rec["accuracy_test"]
            report.save_json(cdir / "report.json")
            rec.update({
                "reconstruction_error": report.reconstruction_error,
                "random_baseline_error": report.random_baseline_error,
                "objective": sol.objective,
                "hard_feasible": sol.hard_feasible,
                "time_to_first_feasible": sol.time_to_first_feasible,
                "privacy_leak_cdf": report.privacy_leak_cdf,
                "proportion_perfect": report.proportion_perfect,
                "worst_individual_error": report.worst_individual_error,
                "n_reconstructed": sol.n,
            })
        rec["status"] = "ok"
    except Exception as exc:  # a failed cell is recorded and the sweep moves on
        logger.error("cell %s failed: %s", cid, exc)
        rec["status"] = "error"
        rec["error_message"] = f"{type(exc).__name__}: {exc}"
        (cdir / "error.txt").write_text(traceback.format_exc())
    rec["wall_time"] = time.perf_counter() - start
    record_path.write_text(json.dumps(rec, sort_keys=True))
    _append_csv(root / "results.csv", rec)
    return rec


def _append_csv(path: Path, rec: Mapping[str, Any]) -> None:
    with open(path, "a", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, extrasaction="ignore")
            if fh.tell() == 0:
                w.writeheader()
            w.writerow(rec)
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _run_cell_job(args) -> dict[str, Any]:
    cfg, cell, root = args
    return run_cell(cfg, cell, root)


def summarize(records: Sequence[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Mean and sample std of every metric per grid cell (over seeds, successful runs only)."""
    keyf = ("dataset", "threat_model", "n_train", "num_trees", "depth", "epsilon")
    groups: dict[tuple, list[Mapping[str, Any]]] = {}
    for r in records:
        if r.get("status") == "ok":
            groups.setdefault(tuple(r[k] for k in keyf), []).append(r)
    out = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        row: dict[str, Any] = dict(zip(keyf, key))
        row["runs"] = len(rs)
        for mname in METRICS:
            vals = [float(r[mname]) for r in rs if r.get(mname) not in (None, "")]
            if vals:
                row[f"{mname}_mean"] = float(np.mean(vals))
                row[f"{mname}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def run_sweep(cfg: ExperimentConfig, root: Path | None = None, workers: int | None = None) -> list[dict[str, Any]]:
    root = output_root(root or cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    workers = workers or cfg.workers
    if workers <= 1:
        records = [run_cell(cfg, c, root) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_run_cell_job, [(cfg, c, root) for c in cells]))
    summary = summarize(records)
    if summary:
        fields = sorted({k for row in summary for k in row}, key=lambda k: (k not in summary[0], k))
        with open(root / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0].keys()) + [f for f in fields if f not in summary[0]])
            w.writeheader()
            w.writerows(summary)
    return records
