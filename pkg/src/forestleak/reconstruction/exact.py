"""Exhaustive solver for tiny instances: enumerate multisets of (pattern, label) items."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .problem import ReconstructionProblem
from .solution import CandidateSolution, make_solution

DEFAULT_CEILING = 10**7
CHUNK = 1 << 15


class SearchSpaceTooLarge(RuntimeError):
    pass


class InfeasibleProblem(RuntimeError):
    """No assignment keeps every inferred noise value inside [-gamma, gamma]."""


@dataclass(frozen=True)
class ExactLimits:
    ceiling: int = DEFAULT_CEILING
    time_limit: float | None = None


def valid_patterns(problem: ReconstructionProblem, fixed: dict[int, int] | None = None) -> np.ndarray:
    """Every one-hot-consistent attribute vector agreeing with ``fixed``, in lexicographic order."""
    m = problem.num_features
    fixed = fixed or {}
    grouped = {a for g in problem.groups for a in g.attribute_indices}
    choices: list[list[tuple[tuple[int, int], ...]]] = []
    for g in problem.groups:
        opts = []
        for on in g.attribute_indices:
            assign = tuple((a, int(a == on)) for a in g.attribute_indices)
            if all(fixed.get(a, v) == v for a, v in assign):
                opts.append(assign)
        choices.append(opts)
    for a in range(m):
        if a not in grouped:
            choices.append([((a, v),) for v in (0, 1) if fixed.get(a, v) == v])
    out = []
    for combo in itertools.product(*choices):
        row = [0] * m
        for part in combo:
            for a, v in part:
                row[a] = v
        out.append(tuple(row))
    out.sort()
    return np.array(out, dtype=np.uint8).reshape(len(out), m)


def _items(problem: ReconstructionProblem, patterns: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse patterns routing identically in every tree; return (rows, labels, cell ids)."""
    leaves = problem.leaves_of(patterns)
    seen: dict[tuple[int, ...], int] = {}
    reps = []
    for i, sig in enumerate(map(tuple, leaves.tolist())):
        if sig not in seen:
            seen[sig] = i
            reps.append(i)
    reps_arr = np.array(reps, dtype=np.int64)
    C = problem.num_classes
    rows = np.repeat(patterns[reps_arr], C, axis=0)
    labels = np.tile(np.arange(C), len(reps))
    lv = np.repeat(leaves[reps_arr], C, axis=0)
    offsets = np.array(problem.cell_offsets[:-1], dtype=np.int64)
    cells = offsets[None, :] + lv * C + labels[:, None]
    return rows, labels, cells


def _row_classes(problem: ReconstructionProblem, n_rows: int) -> list[tuple[list[int], dict[int, int]]]:
    """Rows sharing the same fixed values are exchangeable; group them."""
    k0 = problem.num_known_rows
    classes: dict[tuple, list[int]] = {}
    for k in range(k0, n_rows):
        key = tuple((a, int(col[k])) for a, col in problem.known_columns.items())
        classes.setdefault(key, []).append(k)
    return [(idx, dict(key)) for key, idx in sorted(classes.items(), key=lambda kv: kv[1][0])]


def search_space_size(problem: ReconstructionProblem, n_rows: int) -> int:
    """Number of ordered (pattern, label) assignments to the free rows."""
    total = 1
    for idx, fixed in _row_classes(problem, n_rows):
        total *= (len(valid_patterns(problem, fixed)) * problem.num_classes) ** len(idx)
    return total


def _score_chunk(
    problem: ReconstructionProblem, base: np.ndarray, cells: np.ndarray, combos: np.ndarray,
    reg_item: np.ndarray | None, reg_base: float,
) -> np.ndarray:
    counts = np.tile(base, (combos.shape[0], 1))
    r = np.arange(combos.shape[0])
    for j in range(combos.shape[1]):
        c = cells[combos[:, j]]
        for t in range(cells.shape[1]):
            np.add.at(counts, (r, c[:, t]), 1)
    deltas = problem.noisy_flat[None, :] - counts
    model = problem.noise_model
    g = model.gamma
    inside = np.abs(deltas) <= g
    lp = np.where(inside, model.log_pmf[np.clip(deltas + g, 0, 2 * g)], -np.inf)
    ll = lp.sum(axis=1)
    if not problem.informed:
        return ll
    reg = reg_base + reg_item[combos].sum(axis=1)
    return reg + problem.alpha * ll / problem.num_cells


def _solve_fixed_n(problem: ReconstructionProblem, n_rows: int, limits: ExactLimits, deadline: float | None):
    size = search_space_size(problem, n_rows)
    if size > limits.ceiling:
        raise SearchSpaceTooLarge(f"{size} assignments for {n_rows} rows exceeds ceiling {limits.ceiling}")
    k0 = problem.num_known_rows
    m = problem.num_features
    base = np.zeros(problem.num_cells, dtype=np.int64)
    reg_base = 0.0
    known_ones = None
    if k0:
        base = problem.derived_counts(problem.known_rows.rows, problem.known_rows.labels)
        known_ones = problem.known_rows.rows.sum(axis=0).astype(np.float64)

    classes = _row_classes(problem, n_rows)
    per_class = []
    for idx, fixed in classes:
        rows, labels, cells = _items(problem, valid_patterns(problem, fixed))
        reg_item = None
        if known_ones is not None:
            reg_item = -np.where(rows == 1, k0 - known_ones, known_ones).sum(axis=1) / k0
        per_class.append((idx, rows, labels, cells, reg_item))

    best = -math.inf
    best_choice: list[np.ndarray] | None = None
    *prefix, last = per_class if per_class else [None]
    prefix_iters = [
        itertools.combinations_with_replacement(range(len(c[1])), len(c[0])) for c in prefix
    ]
    for pre in itertools.product(*[list(it) for it in prefix_iters]):
        pbase = base.copy()
        preg = reg_base
        for (idx, rows, labels, cells, reg_item), combo in zip(prefix, pre):
            for i in combo:
                np.add.at(pbase, cells[i], 1)
                if reg_item is not None:
                    preg += reg_item[i]
        if last is None:
            continue
        idx, rows, labels, cells, reg_item = last
        it = itertools.combinations_with_replacement(range(len(rows)), len(idx))
        while True:
            flat = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, CHUNK)), dtype=np.int64)
            if flat.size == 0:
                break
            combos = flat.reshape(-1, len(idx))
            vals = _score_chunk(problem, pbase, cells, combos, reg_item, preg)
            j = int(np.argmax(vals))
            if vals[j] > best:
                best = float(vals[j])
                best_choice = [np.array(c, dtype=np.int64) for c in pre] + [combos[j].copy()]
            if deadline is not None and time.perf_counter() > deadline:
                raise TimeoutError("exact search ran out of time")
    if best_choice is None or best == -math.inf:
        return None, best
    out_rows = np.zeros((n_rows, m), dtype=np.uint8)
    out_labels = np.zeros(n_rows, dtype=np.int64)
    if k0:
        out_rows[:k0] = problem.known_rows.rows
        out_labels[:k0] = problem.known_rows.labels
    for (idx, rows, labels, _, _), choice in zip(per_class, best_choice):
        out_rows[idx] = rows[choice]
        out_labels[idx] = labels[choice]
    return (out_rows, out_labels), best


def solve_exact(problem: ReconstructionProblem, limits: ExactLimits | None = None) -> CandidateSolution:
    """Certified optimum under the hard model; ties go to the first multiset in lexicographic order.

    With an interval on N every admissible size is tried and the smallest size among
    equally good optima wins.
    """
    limits = limits or ExactLimits()
    start = time.perf_counter()
    deadline = None if limits.time_limit is None else start + limits.time_limit
    best = -math.inf
    best_rows = None
    for n_rows in range(problem.n_min, problem.n_max + 1):
        found, val = _solve_fixed_n(problem, n_rows, limits, deadline)
        if found is not None and val > best:
            best, best_rows = val, found
    if best_rows is None:
        raise InfeasibleProblem("every assignment puts some inferred noise outside [-gamma, gamma]")
    elapsed = time.perf_counter() - start
    return make_solution(
        problem, *best_rows, certified_optimal=True, time_to_first_feasible=elapsed,
        stats={"solver": "exact", "wall_time": elapsed},
    )
