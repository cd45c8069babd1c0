"""Attack-success metrics: matched reconstruction error, baselines, leak statistics, outliers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .dataset import BinaryDataset, OneHotGroup


@dataclass(frozen=True)
class MatchingResult:
    """``assignment[i]`` is the original row matched to reconstructed row ``i``."""

    assignment: np.ndarray
    total_cost: float
    per_pair_costs: np.ndarray


def _as_rows(x: BinaryDataset | np.ndarray) -> np.ndarray:
    return x.rows if isinstance(x, BinaryDataset) else np.asarray(x)


def manhattan_cost_matrix(reconstructed: BinaryDataset | np.ndarray, original: BinaryDataset | np.ndarray) -> np.ndarray:
    """Attribute-wise L1 distance between every reconstructed and original row (labels ignored)."""
    r = _as_rows(reconstructed).astype(np.int64)
    o = _as_rows(original).astype(np.int64)
    if r.ndim != 2 or o.ndim != 2 or r.shape != o.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {o.shape}")
    # for 0/1 entries |a - b| = a(1 - b) + (1 - a)b
    return r @ (1 - o).T + (1 - r) @ o.T


def min_cost_matching(cost: np.ndarray) -> MatchingResult:
    cost = np.asarray(cost)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(cost.shape[0], dtype=np.int64)
    assignment[rows] = cols
    per_pair = cost[np.arange(cost.shape[0]), assignment]
    return MatchingResult(assignment, float(per_pair.sum()), per_pair)


def reconstruction_error(reconstructed: BinaryDataset | np.ndarray, original: BinaryDataset | np.ndarray) -> float:
    """Optimal-matching Manhattan cost divided by N*M."""
    cost = manhattan_cost_matrix(reconstructed, original)
    n, m = _as_rows(original).shape
    if n == 0 or m == 0:
        raise ValueError("empty dataset")
    return min_cost_matching(cost).total_cost / (n * m)


def align_unknown_n(reconstructed: BinaryDataset, n_true: int, seed: int = 0) -> BinaryDataset:
    """Subsample (too many rows) or pad with random duplicates (too few) to ``n_true`` rows."""
    n = reconstructed.n
    if n < 1:
        raise ValueError("need at least one reconstructed row")
    if n == n_true:
        return reconstructed
    rng = np.random.default_rng(seed)
    if n > n_true:
        idx = np.sort(rng.choice(n, size=n_true, replace=False))
    else:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=n_true - n)])
    return reconstructed.subset(idx)


def random_dataset(n: int, m: int, groups: Sequence[OneHotGroup], num_classes: int, rng: np.random.Generator) -> BinaryDataset:
    """Uniform guess: free attributes are fair coins, each group picks one member uniformly."""
    rows = (rng.random((n, m)) < 0.5).astype(np.uint8)
    for g in groups:
        idx = np.asarray(g.attribute_indices)
        rows[:, idx] = 0
        rows[np.arange(n), idx[rng.integers(0, len(idx), size=n)]] = 1
    labels = rng.integers(0, num_classes, size=n)
    return BinaryDataset(rows, labels, num_classes, tuple(groups))


def random_baseline(original: BinaryDataset, groups: Sequence[OneHotGroup] | None = None, runs: int = 100,
                    seed: int = 0) -> float:
    groups = original.groups if groups is None else tuple(groups)
    rng = np.random.default_rng(seed)
    errs = [
        reconstruction_error(random_dataset(original.n, original.m, groups, original.num_classes, rng), original)
        for _ in range(runs)
    ]
    return float(np.mean(errs))


def majority_baseline(known_rows: BinaryDataset | np.ndarray, groups: Sequence[OneHotGroup] | None = None) -> np.ndarray:
    """Per-coordinate majority (ties to 1), then the fewest flips that restore one-hot groups.

    Among equally short repairs the member seen most often wins, then the lowest index.
    """
    rows = _as_rows(known_rows)
    if groups is None:
        groups = known_rows.groups if isinstance(known_rows, BinaryDataset) else ()
    if rows.shape[0] == 0:
        raise ValueError("majority baseline needs at least one row")
    ones = rows.sum(axis=0).astype(np.int64)
    k = rows.shape[0]
    out = (2 * ones >= k).astype(np.uint8)
    for g in groups:
        idx = list(g.attribute_indices)
        on = [a for a in idx if out[a]]
        if len(on) == 1:
            continue
        pool = on if on else idx  # keep one of the set bits, or set exactly one
        best = min(pool, key=lambda a: (-ones[a], a))
        out[idx] = 0
        out[best] = 1
    return out


def perfect_reconstruction_stats(matching: MatchingResult, m: int) -> tuple[float, float]:
    """(percentage of matched pairs at distance 0, largest per-pair distance / M)."""
    costs = np.asarray(matching.per_pair_costs)
    if costs.size == 0:
        return 100.0, 0.0
    return 100.0 * float((costs == 0).mean()), float(costs.max()) / m


def normal_cdf(x: float, mean: float = 0.0, std: float = 1.0) -> float:
    return float(stats.norm.cdf(x, loc=mean, scale=std))


@dataclass(frozen=True)
class LeakResult:
    cdf: float
    actual_error: float
    sample_mean: float
    sample_std: float
    degenerate: bool
    sample_errors: tuple[float, ...] = field(default=(), repr=False)


def privacy_leak(reconstructed: BinaryDataset, original: BinaryDataset, heldout_pool: BinaryDataset,
                 samples: int = 100, seed: int = 0) -> LeakResult:
    """Where the actual error falls within errors against same-size held-out samples (normal fit)."""
    n = original.n
    if heldout_pool is None or heldout_pool.n < n:
        raise ValueError(f"held-out pool has {0 if heldout_pool is None else heldout_pool.n} rows, need {n}")
    if samples < 2:
        raise ValueError("need at least two samples to fit a normal")
    rng = np.random.default_rng(seed)
    actual = reconstruction_error(reconstructed, original)
    errs = []
    for _ in range(samples):
        idx = rng.choice(heldout_pool.n, size=n, replace=False)
        errs.append(reconstruction_error(reconstructed, heldout_pool.rows[idx]))
    mean = float(np.mean(errs))
    std = float(np.std(errs, ddof=1))
    if std == 0.0:
        cdf = 0.5 if actual == mean else (0.0 if actual < mean else 1.0)
        return LeakResult(cdf, actual, mean, std, True, tuple(errs))
    return LeakResult(normal_cdf(actual, mean, std), actual, mean, std, False, tuple(errs))


def privacy_leak_cdf(reconstructed: BinaryDataset, original: BinaryDataset, heldout_pool: BinaryDataset,
                     samples: int = 100, seed: int = 0) -> float:
    return privacy_leak(reconstructed, original, heldout_pool, samples, seed).cdf


def isolation_scores(dataset: BinaryDataset | np.ndarray, num_itrees: int = 100, subsample: int = 256,
                     seed: int = 0) -> np.ndarray:
    """Isolation-forest anomaly score 2^(-E[h(x)]/c(n)) per row; higher means more isolated."""
    from sklearn.ensemble import IsolationForest

    x = _as_rows(dataset).astype(np.float64)
    forest = IsolationForest(n_estimators=num_itrees, max_samples=min(subsample, x.shape[0]), random_state=seed)
    forest.fit(x)
    return -forest.score_samples(x)


def split_inliers_outliers(scores: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores)
    out = scores > threshold
    return np.flatnonzero(~out), np.flatnonzero(out)


@dataclass
class EvaluationReport:
    reconstruction_error: float
    random_baseline_error: float | None = None
    majority_baseline_error: float | None = None
    proportion_perfect: float | None = None
    worst_individual_error: float | None = None
    label_agreement: float | None = None
    inlier_stats: dict[str, float] | None = None
    outlier_stats: dict[str, float] | None = None
    privacy_leak_cdf: float | None = None
    privacy_leak_degenerate: bool | None = None
    accuracy_train: float | None = None
    accuracy_test: float | None = None
    n_true: int | None = None
    n_reconstructed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _group_stats(per_pair: np.ndarray, rows: np.ndarray, m: int) -> dict[str, float]:
    if rows.size == 0:
        return {"count": 0, "avg_error": float("nan"), "pct_perfect": float("nan")}
    c = per_pair[rows]
    return {"count": int(rows.size), "avg_error": float(c.mean()) / m, "pct_perfect": 100.0 * float((c == 0).mean())}


def evaluate_reconstruction(
    reconstructed: BinaryDataset,
    original: BinaryDataset,
    *,
    seed: int = 0,
    baseline_runs: int = 100,
    leak_samples: int = 100,
    heldout_pool: BinaryDataset | None = None,
    with_outliers: bool = True,
) -> EvaluationReport:
    """Full report for a whole-dataset reconstruction; aligns the row count first if needed."""
    n_rec = reconstructed.n
    aligned = align_unknown_n(reconstructed, original.n, seed) if n_rec != original.n else reconstructed
    cost = manhattan_cost_matrix(aligned, original)
    match = min_cost_matching(cost)
    m = original.m
    err = match.total_cost / (original.n * m)
    pct, worst = perfect_reconstruction_stats(match, m)
    # assignment maps reconstructed -> original; invert to index by original row
    inv = np.empty_like(match.assignment)
    inv[match.assignment] = np.arange(match.assignment.size)
    per_original = match.per_pair_costs[inv]
    labels_ok = float((aligned.labels[inv] == original.labels).mean())
    report = EvaluationReport(
        reconstruction_error=err,
        random_baseline_error=random_baseline(original, runs=baseline_runs, seed=seed) if baseline_runs else None,
        proportion_perfect=pct,
        worst_individual_error=worst,
        label_agreement=labels_ok,
        n_true=original.n,
        n_reconstructed=n_rec,
    )
    if with_outliers and original.n >= 2:
        scores = isolation_scores(original, seed=seed)
        inl, outl = split_inliers_outliers(scores)
        report.inlier_stats = _group_stats(per_original, inl, m)
        report.outlier_stats = _group_stats(per_original, outl, m)
    pool = heldout_pool if heldout_pool is not None else original.heldout
    if pool is not None and pool.n >= original.n and leak_samples:
        leak = privacy_leak(aligned, original, pool, leak_samples, seed)
        report.privacy_leak_cdf = leak.cdf
        report.privacy_leak_degenerate = leak.degenerate
        report.extra["leak_sample_mean"] = leak.sample_mean
        report.extra["leak_sample_std"] = leak.sample_std
    return report


def per_example_error(row: np.ndarray, target: np.ndarray) -> float:
    row = np.asarray(row, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    return float(np.abs(row - target).sum()) / row.size
