"""Candidate reconstructions, an independent constraint checker, and artifact IO."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..dataset import BinaryDataset
from .problem import ReconstructionProblem


@dataclass(frozen=True)
class TracePoint:
    wall_time: float
    objective: float
    hard_feasible: bool


@dataclass(frozen=True)
class CandidateSolution:
    """Reconstructed rows and labels with everything derived from them.

    ``objective`` uses the soft tail, so it is finite even when some inferred
    noise value lies outside [-gamma, gamma]; it equals the model objective
    whenever ``hard_feasible`` is true.
    """

    rows: np.ndarray
    labels: np.ndarray
    derived_counts: np.ndarray
    deltas: np.ndarray
    loglik: float
    regularizer: float
    objective: float
    hard_feasible: bool
    num_known_rows: int = 0
    certified_optimal: bool = False
    trace: tuple[TracePoint, ...] = field(default=(), compare=False)
    time_to_first_feasible: float | None = field(default=None, compare=False)
    stats: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def make_solution(
    problem: ReconstructionProblem,
    rows: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    **extra: Any,
) -> CandidateSolution:
    rows = np.asarray(rows, dtype=np.uint8).reshape(-1, problem.num_features).copy()
    labels = np.asarray(labels, dtype=np.int64).copy()
    s = problem.score(rows, labels)
    for arr in (rows, labels, s["counts"], s["deltas"]):
        arr.setflags(write=False)
    return CandidateSolution(
        rows=rows,
        labels=labels,
        derived_counts=s["counts"],
        deltas=s["deltas"],
        loglik=s["loglik"],
        regularizer=s["regularizer"],
        objective=s["objective"],
        hard_feasible=s["hard_feasible"],
        num_known_rows=problem.num_known_rows,
        **extra,
    )


class ConstraintViolation(AssertionError):
    pass


def check_solution(problem: ReconstructionProblem, sol: CandidateSolution, rel_tol: float = 1e-9) -> None:
    """Re-derive every count from the leaf predicate sets and compare with the stored fields.

    Deliberately avoids the routing code used during search: a row belongs to a leaf
    when all attributes forced to 1 are 1 and all attributes forced to 0 are 0.
    Raises ConstraintViolation on the first mismatch.
    """
    rows = [[int(b) for b in r] for r in np.asarray(sol.rows).tolist()]
    labels = [int(c) for c in np.asarray(sol.labels).tolist()]
    n = len(rows)
    m = problem.num_features
    C = problem.num_classes
    if len(labels) != n:
        raise ConstraintViolation("one label per row required")
    if not problem.n_min <= n <= problem.n_max:
        raise ConstraintViolation(f"row count {n} outside [{problem.n_min}, {problem.n_max}]")
    for k, r in enumerate(rows):
        if len(r) != m or any(b not in (0, 1) for b in r):
            raise ConstraintViolation(f"row {k} is not a binary vector of length {m}")
        if not 0 <= labels[k] < C:
            raise ConstraintViolation(f"row {k} has label {labels[k]} outside [0, {C})")
        for g in problem.groups:
            if sum(r[a] for a in g.attribute_indices) != 1:
                raise ConstraintViolation(f"row {k} breaks one-hot group {g.attribute_indices}")
    for a, col in problem.known_columns.items():
        for k in range(n):
            if rows[k][a] != int(col[k]):
                raise ConstraintViolation(f"row {k} disagrees with known column {a}")
    if problem.known_rows is not None:
        kr = problem.known_rows
        for k in range(kr.n):
            if rows[k] != [int(b) for b in kr.rows[k]] or labels[k] != int(kr.labels[k]):
                raise ConstraintViolation(f"known row {k} was altered")

    expected = []
    for t in problem.trees:
        table = [[0] * C for _ in range(t.num_leaves)]
        for k, r in enumerate(rows):
            hits = [
                v for v in range(t.num_leaves)
                if all(r[a] == 1 for a in t.positive_splits[v]) and all(r[a] == 0 for a in t.negative_splits[v])
            ]
            if len(hits) != 1:
                raise ConstraintViolation(f"row {k} satisfies {len(hits)} leaves of a tree")
            table[hits[0]][labels[k]] += 1
        if sum(map(sum, table)) != n:
            raise ConstraintViolation("per-tree total differs from the number of rows")
        expected.extend(c for leaf in table for c in leaf)
    if list(np.asarray(sol.derived_counts).tolist()) != expected:
        raise ConstraintViolation("stored derived counts differ from recomputed counts")
    noisy = [int(x) for x in problem.noisy_flat]
    deltas = [a - b for a, b in zip(noisy, expected)]
    if list(np.asarray(sol.deltas).tolist()) != deltas:
        raise ConstraintViolation("stored deltas differ from noisy minus derived counts")

    model = problem.noise_model
    gamma = model.gamma
    feasible = all(abs(d) <= gamma for d in deltas)
    if feasible:
        for ns, nc in zip(noisy, expected):
            if not max(0, ns - gamma) <= nc <= ns + gamma:
                raise ConstraintViolation("count outside its restricted domain")
    if feasible != sol.hard_feasible:
        raise ConstraintViolation("hard_feasible flag is wrong")
    ll = 0.0
    for d in deltas:
        a = abs(d)
        if math.isinf(model.epsilon_v):
            lp = 0.0 if a == 0 else -a * model.tail_slope
        else:
            e = model.epsilon_v
            base = math.log1p(-math.exp(-e))
            lp = base if a == 0 else math.log(0.5) - min(a, gamma) * e + base
            if a > gamma:
                lp -= (a - gamma) * model.tail_slope
        ll += lp
    if not math.isclose(ll, sol.loglik, rel_tol=rel_tol, abs_tol=1e-9):
        raise ConstraintViolation(f"stored log-likelihood {sol.loglik} differs from {ll}")
    reg = 0.0
    if problem.known_rows is not None:
        known = [[int(b) for b in r] for r in problem.known_rows.rows.tolist()]
        for r in rows[len(known):]:
            reg -= sum(sum(abs(x - y) for x, y in zip(r, q)) for q in known) / len(known)
    if not math.isclose(reg, sol.regularizer, rel_tol=rel_tol, abs_tol=1e-9):
        raise ConstraintViolation("stored regularizer differs from a direct Manhattan sum")
    obj = reg + problem.alpha * ll / problem.num_cells if problem.informed else ll
    if not math.isclose(obj, sol.objective, rel_tol=rel_tol, abs_tol=1e-9):
        raise ConstraintViolation("stored objective is inconsistent with its parts")


def extract_reconstruction(
    sol: CandidateSolution, template: BinaryDataset | None = None, *, num_classes: int | None = None, groups=()
) -> BinaryDataset:
    """Rows and labels in lexicographic order (labels last), duplicates kept."""
    rows = np.asarray(sol.rows, dtype=np.uint8)
    labels = np.asarray(sol.labels, dtype=np.int64)
    if rows.shape[0]:
        keys = np.column_stack([rows, labels])
        order = np.lexsort(keys.T[::-1])
        rows, labels = rows[order], labels[order]
    if template is not None:
        return template.with_rows(rows, labels)
    return BinaryDataset(rows, labels, num_classes or max(2, int(labels.max(initial=1)) + 1), groups)


def free_rows(sol: CandidateSolution) -> tuple[np.ndarray, np.ndarray]:
    """The rows the adversary did not already know."""
    k = sol.num_known_rows
    return sol.rows[k:], sol.labels[k:]


# ------------------------------------------------------------------------ io


def solution_to_dict(sol: CandidateSolution, problem: ReconstructionProblem) -> dict[str, Any]:
    ds = BinaryDataset(sol.rows, sol.labels, problem.num_classes, problem.groups)
    out = ds.to_dict()
    out.update({
        "threat_model": problem.threat_model,
        "num_known_rows": sol.num_known_rows,
        "deltas": sol.deltas.tolist(),
        "derived_counts": sol.derived_counts.tolist(),
        "objective": sol.objective,
        "loglik": sol.loglik,
        "regularizer": sol.regularizer,
        "hard_feasible": sol.hard_feasible,
        "certified_optimal": sol.certified_optimal,
        "time_to_first_feasible": sol.time_to_first_feasible,
        "gamma": problem.noise_model.gamma,
        "n_min": problem.n_min,
        "n_max": problem.n_max,
        "stats": sol.stats,
    })
    return out


def save_solution(sol: CandidateSolution, problem: ReconstructionProblem, path: str | Path) -> None:
    Path(path).write_text(json.dumps(solution_to_dict(sol, problem), indent=1, sort_keys=True, default=float))


def load_solution_dataset(path: str | Path) -> tuple[BinaryDataset, dict[str, Any]]:
    data = json.loads(Path(path).read_text())
    return BinaryDataset.from_dict(data), data


def save_trace(trace: Sequence[TracePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wall_time", "objective", "hard_feasible"])
        for p in trace:
            w.writerow([f"{p.wall_time:.6f}", repr(p.objective), int(p.hard_feasible)])
