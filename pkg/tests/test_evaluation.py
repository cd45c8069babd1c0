from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from forestleak.dataset import BinaryDataset, OneHotGroup, generate_synthetic
from forestleak.evaluation import (
    align_unknown_n,
    evaluate_reconstruction,
    isolation_scores,
    majority_baseline,
    manhattan_cost_matrix,
    min_cost_matching,
    normal_cdf,
    per_example_error,
    perfect_reconstruction_stats,
    privacy_leak,
    random_baseline,
    random_dataset,
    reconstruction_error,
    split_inliers_outliers,
)


def brute_matching_cost(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def ds(rows, labels=None, groups=()):
    rows = np.asarray(rows, dtype=np.uint8)
    labels = np.zeros(len(rows), dtype=np.int64) if labels is None else np.asarray(labels)
    return BinaryDataset(rows, labels, 2, groups)


@settings(max_examples=40)
@given(data=st.data())
def test_cost_matrix_matches_double_loop(data):
    n = data.draw(st.integers(1, 6))
    m = data.draw(st.integers(1, 8))
    a = data.draw(hnp.arrays(np.uint8, (n, m), elements=st.integers(0, 1)))
    b = data.draw(hnp.arrays(np.uint8, (n, m), elements=st.integers(0, 1)))
    c = manhattan_cost_matrix(a, b)
    for i in range(n):
        for j in range(n):
            assert c[i, j] == sum(abs(int(x) - int(y)) for x, y in zip(a[i], b[j]))


@settings(max_examples=40)
@given(cost=hnp.arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)).map(lambda t: (t[0], t[0])),
                       elements=st.integers(0, 20)))
def test_matching_is_optimal(cost):
    res = min_cost_matching(cost)
    assert sorted(res.assignment.tolist()) == list(range(cost.shape[0]))
    assert res.total_cost == brute_matching_cost(cost)


def test_error_examples():
    a = ds([[1, 0, 1], [0, 0, 0]])
    assert reconstruction_error(a, a) == 0.0
    # swapped order still matches perfectly
    assert reconstruction_error(ds([[0, 0, 0], [1, 0, 1]]), a) == 0.0
    assert reconstruction_error(ds([[0, 1, 0], [1, 1, 1]]), a) == pytest.approx(2 / 6)
    assert reconstruction_error(ds([[0, 1, 0], [0, 1, 0]]), a) == pytest.approx(4 / 6)
    # labels are not part of the cost
    assert reconstruction_error(ds([[1, 0, 1], [0, 0, 0]], [1, 1]), a) == 0.0
    with pytest.raises(ValueError):
        reconstruction_error(ds([[1, 0, 1]]), a)


def test_align_unknown_n():
    rec = ds(np.eye(5, dtype=np.uint8))
    small = align_unknown_n(rec, 3, seed=1)
    assert small.n == 3
    assert all(any((r == e).all() for e in rec.rows) for r in small.rows)
    big = align_unknown_n(rec, 8, seed=1)
    assert big.n == 8 and (big.rows[:5] == rec.rows).all()
    assert align_unknown_n(rec, 5) is rec


def test_majority_baseline_examples():
    k = ds([[1, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 0]])
    assert majority_baseline(k).tolist() == [1, 1, 1]  # 3/4, 2/4 tie -> 1, 2/4 tie -> 1
    g = (OneHotGroup((0, 1, 2)),)
    # columns 0 and 1 both reach a majority; keep the more frequent one
    k2 = ds([[1, 0, 0, 1], [1, 1, 0, 0], [0, 1, 0, 1], [1, 0, 0, 0], [1, 1, 0, 1]], groups=())
    assert majority_baseline(k2, g).tolist() == [1, 0, 0, 1]
    # nobody in the group has a majority: set the most frequent member
    k3 = ds([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 1, 0]])
    assert majority_baseline(k3, g).tolist() == [0, 1, 0, 0]


def test_majority_repair_is_minimal():
    rng = np.random.default_rng(0)
    g = (OneHotGroup((0, 1, 2)), OneHotGroup((4, 5)))
    for _ in range(30):
        known = rng.integers(0, 2, size=(7, 6))
        raw = (2 * known.sum(0) >= 7).astype(int)
        out = majority_baseline(ds(known), g)
        for grp in g:
            assert out[list(grp.attribute_indices)].sum() == 1
        best = min(
            np.abs(np.array(v) - raw).sum()
            for v in itertools.product((0, 1), repeat=6)
            if all(sum(v[a] for a in grp.attribute_indices) == 1 for grp in g)
        )
        assert np.abs(out - raw).sum() == best


def test_perfect_stats():
    a = ds([[1, 0, 1, 1], [0, 0, 0, 0]])
    b = ds([[1, 0, 1, 1], [1, 1, 0, 0]])
    match = min_cost_matching(manhattan_cost_matrix(b, a))
    pct, worst = perfect_reconstruction_stats(match, 4)
    assert pct == 50.0 and worst == 0.5


def test_normal_cdf_against_erfc():
    for x in (-5.0, -1.3, 0.0, 0.7, 4.2):
        assert normal_cdf(x) == pytest.approx(0.5 * math.erfc(-x / math.sqrt(2)), abs=1e-12)
    assert normal_cdf(3.0, 1.0, 2.0) == pytest.approx(0.5 * math.erfc(-1 / math.sqrt(2)), abs=1e-12)


def test_leak_near_half_for_unrelated_reconstruction():
    pool = generate_synthetic(8, 2000, seed=0)
    train = pool.subset(range(100))
    held = pool.subset(range(100, 2000))
    rec = random_dataset(100, 8, (), 2, np.random.default_rng(3))
    res = privacy_leak(rec, train, held, samples=100, seed=0)
    assert 0.02 < res.cdf < 0.98
    assert res.sample_std > 0


def test_leak_small_for_exact_copy():
    pool = generate_synthetic(10, 1000, seed=1)
    train = pool.subset(range(50))
    res = privacy_leak(train, train, pool.subset(range(50, 1000)), samples=50)
    assert res.actual_error == 0.0 and res.cdf < 1e-3


def test_leak_degenerate_pool():
    rows = np.zeros((10, 3), dtype=np.uint8)
    train = ds(rows[:2])
    held = ds(rows)
    assert privacy_leak(train, train, held, samples=5).cdf == 0.5
    ones = ds([[1, 1, 1], [1, 1, 1]])
    # actual error 1 against a pool where every sample costs 0
    assert privacy_leak(train, ones, held, samples=5).cdf == 1.0
    assert privacy_leak(ones, ones, held, samples=5).cdf == 0.0
    with pytest.raises(ValueError):
        privacy_leak(train, train, ds(rows[:1]), samples=5)


def test_isolation_flags_planted_outlier():
    rows = np.zeros((200, 12), dtype=np.uint8)
    rows[:, :3] = 1
    rows[-1] = 1 - rows[-1]
    scores = isolation_scores(ds(rows), seed=0)
    assert int(np.argmax(scores)) == 199
    inl, outl = split_inliers_outliers(scores)
    assert 199 in outl and len(inl) + len(outl) == 200
    # duplicates score identically
    assert np.allclose(scores[:199], scores[0])


def test_random_baseline_reasonable():
    data = generate_synthetic(10, 50, seed=2, group_layout=(3,))
    r = random_dataset(50, 10, data.groups, 2, np.random.default_rng(0))
    assert (r.rows[:, :3].sum(1) == 1).all()
    err = random_baseline(data, runs=10, seed=0)
    assert 0.1 < err < 0.5
    assert err == random_baseline(data, runs=10, seed=0)


def test_evaluate_report_fields():
    pool = generate_synthetic(8, 600, seed=3)
    train = pool.subset(range(60))
    rec = train.subset(list(range(55)))
    report = evaluate_reconstruction(rec, train, seed=0, baseline_runs=5, leak_samples=20,
                                     heldout_pool=pool.subset(range(60, 600)))
    assert report.n_true == 60 and report.n_reconstructed == 55
    assert 0.0 <= report.reconstruction_error < report.random_baseline_error
    assert report.inlier_stats["count"] + report.outlier_stats["count"] == 60
    assert report.privacy_leak_cdf is not None
    d = report.to_dict()
    assert d["reconstruction_error"] == report.reconstruction_error


def test_per_example_error():
    assert per_example_error([1, 0, 1, 0], [1, 1, 1, 1]) == 0.5
