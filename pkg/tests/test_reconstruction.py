from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestleak.dataset import BinaryDataset, OneHotGroup, generate_synthetic
from forestleak.forest import Forest, train_dp_forest
from forestleak.noise import gamma_bound, noise_pmf
from forestleak.reconstruction import (
    ConstraintViolation,
    ExactLimits,
    InfeasibleProblem,
    SearchSpaceTooLarge,
    ThreatModelError,
    build_problem,
    check_solution,
    estimate_n_interval,
    extract_reconstruction,
    free_rows,
    make_solution,
    search_space_size,
    solve_anytime,
    solve_exact,
    valid_patterns,
)
from forestleak.reconstruction.solution import load_solution_dataset, save_solution, save_trace


def tiny_forest(seed: int, m: int = 3, n: int = 3, trees: int = 2, depth: int = 2, eps=2.0, groups=()):
    ds = generate_synthetic(m, n, seed=seed, group_layout=groups)
    return ds, train_dp_forest(ds, trees, depth, eps, seed)


def brute_force_best(forest: Forest, n: int) -> float:
    """Max hard log-likelihood over all multisets of (row, label), scored from scratch."""
    m, C = forest.num_features, forest.num_classes
    eps_v = float(forest.epsilon_per_leaf)
    g = gamma_bound(eps_v)
    items = [(r, c) for r in itertools.product((0, 1), repeat=m) for c in range(C)]
    best = -math.inf
    for combo in itertools.combinations_with_replacement(items, n):
        ll = 0.0
        for t in forest.trees:
            counts = np.zeros_like(t.noisy_counts)
            for r, c in combo:
                counts[t.route(r), c] += 1
            d = (t.noisy_counts - counts).ravel()
            if np.abs(d).max() > g:
                ll = -math.inf
                break
            ll += sum(math.log(noise_pmf(eps_v, int(x))) for x in d)
        best = max(best, ll)
    return best


# ------------------------------------------------------------ N interval


def test_interval_known_example():
    ds = generate_synthetic(6, 50, seed=0)
    f = train_dp_forest(ds, 5, 3, 5.0, 0).attacker_view()
    p = build_problem(f, "unknown_n")
    iv = p.n_knowledge
    totals = [int(t.noisy_counts.sum()) for t in f.trees]
    assert iv.per_tree_totals == tuple(totals)
    assert iv.n_star == pytest.approx(np.mean(totals))
    L = max(t.num_leaves for t in f.trees)
    assert iv.sigma_zeta == pytest.approx(math.sqrt(2 * L * 2) / 1.0)
    from scipy import stats
    half = stats.t.ppf(0.975, 4) * iv.sigma_zeta / math.sqrt(5)
    assert iv.n_min == max(1, math.floor(iv.n_star - half))
    assert iv.n_max == math.ceil(iv.n_star + half)


def test_sigma_zeta_oracle():
    # 2 classes, 8 leaves, eps_v = 1 -> sqrt(32)
    ds = generate_synthetic(10, 40, seed=1)
    f = train_dp_forest(ds, 4, 3, 4.0, 3)
    if max(t.num_leaves for t in f.trees) == 8:
        assert estimate_n_interval(f.attacker_view(), build_problem(f, "full", n=40).noise_model).sigma_zeta == \
            pytest.approx(5.656854249492380, rel=1e-14)


def test_single_tree_interval_warns(caplog):
    ds = generate_synthetic(5, 30, seed=2)
    f = train_dp_forest(ds, 1, 2, 1.0, 2)
    with caplog.at_level("WARNING"):
        p = build_problem(f, "unknown_n")
    assert p.n_knowledge.t95 == 1.96
    assert any("single tree" in r.message or "1.96" in r.message for r in caplog.records)


def test_infinite_budget_interval_is_exact():
    ds = generate_synthetic(5, 30, seed=2)
    p = build_problem(train_dp_forest(ds, 3, 2, "inf", 2), "unknown_n")
    assert p.n_min == p.n_max == 30


# ------------------------------------------------------------ problem construction


def test_build_problem_rejects_bad_inputs():
    ds, f = tiny_forest(0)
    with pytest.raises(ThreatModelError):
        build_problem(f, "bogus", n=3)
    with pytest.raises(ThreatModelError):
        build_problem(f, "full")
    with pytest.raises(ThreatModelError):
        build_problem(f, "unknown_n", n=3)
    with pytest.raises(ThreatModelError):
        build_problem(f, "partial", n=3)
    with pytest.raises(ThreatModelError):
        build_problem(f, "informed", n=3)
    with pytest.raises((ThreatModelError, ValueError)):
        build_problem(f, "partial", n=3, known_columns={0: [1, 0]})


def test_problem_never_holds_true_counts():
    ds, f = tiny_forest(0)
    p = build_problem(f, "full", n=3)
    assert all(t.true_counts is None for t in p.trees)
    assert p.num_cells == sum(t.num_leaves * 2 for t in f.trees)


def test_informed_default_alpha():
    ds, f = tiny_forest(0, n=4, eps=0.5)
    p = build_problem(f, "informed", n=4, known_rows=ds.subset([0, 1, 2]))
    assert p.alpha == pytest.approx(10.0)
    _, finf = tiny_forest(0, n=4, eps="inf")
    assert build_problem(finf, "informed", n=4, known_rows=ds.subset([0, 1, 2])).alpha == 1e6


def test_informed_accepts_grouped_known_rows():
    ds = generate_synthetic(5, 6, seed=4, group_layout=(2,))
    f = train_dp_forest(ds, 2, 2, 3.0, 4)
    p = build_problem(f, "informed", n=6, known_rows=ds.subset(range(5)))
    assert p.groups == ds.groups


# ------------------------------------------------------------ exact solver


def test_valid_patterns_respect_groups_and_order():
    ds, f = tiny_forest(0, m=4, n=2, groups=(2,))
    p = build_problem(f, "full", n=2)
    pats = valid_patterns(p)
    assert len(pats) == 2 * 2 * 2
    assert [tuple(r) for r in pats] == sorted(tuple(r) for r in pats)
    assert (pats[:, :2].sum(axis=1) == 1).all()
    assert len(valid_patterns(p, {3: 1})) == 4


@pytest.mark.parametrize("seed", range(6))
def test_exact_matches_brute_force(seed):
    ds, f = tiny_forest(seed)
    p = build_problem(f, "full", n=3)
    try:
        sol = solve_exact(p)
    except InfeasibleProblem:
        assert brute_force_best(f, 3) == -math.inf
        return
    check_solution(p, sol)
    assert sol.certified_optimal and sol.hard_feasible
    assert sol.loglik == pytest.approx(brute_force_best(f, 3), abs=1e-9)


def test_exact_infinite_budget_recovers_leaf_counts():
    ds, f = tiny_forest(3, eps="inf")
    sol = solve_exact(build_problem(f, "full", n=3))
    assert (sol.deltas == 0).all() and sol.loglik == 0.0


def test_exact_refuses_large_problems():
    ds = generate_synthetic(12, 40, seed=0)
    f = train_dp_forest(ds, 3, 3, 1.0, 0)
    p = build_problem(f, "full", n=40)
    assert search_space_size(p, 40) > 10**7
    with pytest.raises(SearchSpaceTooLarge):
        solve_exact(p)
    with pytest.raises(SearchSpaceTooLarge):
        solve_exact(build_problem(f, "full", n=2), ExactLimits(ceiling=10))


def test_exact_is_permutation_invariant():
    ds, f = tiny_forest(1, n=4)
    p = build_problem(f, "full", n=4)
    a = solve_exact(p)
    shuffled = train_dp_forest(ds.subset([3, 1, 0, 2]), 2, 2, 2.0, 1)
    b = solve_exact(build_problem(shuffled, "full", n=4))
    assert a.objective == pytest.approx(b.objective)
    ra = extract_reconstruction(a, num_classes=2)
    rb = extract_reconstruction(b, num_classes=2)
    assert (ra.rows == rb.rows).all() and (ra.labels == rb.labels).all()


def test_exact_unknown_n_stays_in_interval():
    ds, f = tiny_forest(2, m=3, n=3, trees=4, eps=20.0)
    p = build_problem(f, "unknown_n")
    if search_space_size(p, p.n_max) > 10**7:
        pytest.skip("interval too wide for a unit test")
    sol = solve_exact(p)
    assert p.n_min <= sol.n <= p.n_max
    check_solution(p, sol)


def test_partial_mode_keeps_known_columns():
    ds, f = tiny_forest(4, m=4, n=3)
    known = {0: ds.rows[:, 0].tolist(), 2: ds.rows[:, 2].tolist()}
    p = build_problem(f, "partial", n=3, known_columns=known)
    sol = solve_exact(p)
    check_solution(p, sol)
    assert (sol.rows[:, 0] == ds.rows[:, 0]).all() and (sol.rows[:, 2] == ds.rows[:, 2]).all()
    full = solve_exact(build_problem(f, "full", n=3))
    assert sol.loglik <= full.loglik + 1e-12


def test_informed_regularizer_matches_direct_sum():
    ds = generate_synthetic(5, 6, seed=7)
    f = train_dp_forest(ds, 2, 2, 30.0, 7)
    p = build_problem(f, "informed", n=6, known_rows=ds.subset(range(5)))
    rng = np.random.default_rng(0)
    for _ in range(10):
        cand = rng.integers(0, 2, size=5)
        rows = np.vstack([ds.rows[:5], cand])
        direct = -sum(np.abs(cand - k).sum() for k in ds.rows[:5]) / 5
        assert p.regularizer(rows) == pytest.approx(direct)
    sol = solve_exact(p)
    check_solution(p, sol)
    assert (sol.rows[:5] == ds.rows[:5]).all()
    r, y = free_rows(sol)
    assert r.shape == (1, 5)


# ------------------------------------------------------------ anytime solver


@pytest.mark.parametrize("seed", range(4))
def test_anytime_reaches_exact_optimum_on_tiny(seed):
    ds, f = tiny_forest(seed + 10, m=4, n=4, trees=3)
    p = build_problem(f, "full", n=4)
    try:
        ex = solve_exact(p)
    except InfeasibleProblem:
        pytest.skip("no hard-feasible assignment")
    an = solve_anytime(p, time_budget=5.0, seed=seed)
    check_solution(p, an)
    assert an.hard_feasible
    assert an.objective == pytest.approx(ex.objective, abs=1e-9)


def test_anytime_separable_infinite_budget_hits_zero_deltas():
    ds = generate_synthetic(8, 30, seed=5, separable=True)
    f = train_dp_forest(ds, 5, 4, "inf", 5)
    p = build_problem(f, "full", n=30)
    sol = solve_anytime(p, time_budget=20.0, seed=0)
    check_solution(p, sol)
    assert (sol.deltas == 0).all()
    assert p.upper_bound() == 0.0


def test_anytime_reproducible_with_move_limit():
    ds, f = tiny_forest(3, m=6, n=10, trees=3, depth=3)
    p = build_problem(f, "full", n=10)
    a = solve_anytime(p, time_budget=60.0, seed=4, max_moves=20000)
    b = solve_anytime(p, time_budget=60.0, seed=4, max_moves=20000)
    assert (a.rows == b.rows).all() and (a.labels == b.labels).all()


def test_anytime_trace_is_monotone():
    ds, f = tiny_forest(3, m=6, n=10, trees=3, depth=3)
    p = build_problem(f, "full", n=10)
    sol = solve_anytime(p, time_budget=2.0, seed=1)
    objs = [t.objective for t in sol.trace]
    times = [t.wall_time for t in sol.trace]
    assert objs and times == sorted(times)
    assert all(b >= a for a, b in zip(objs, objs[1:]))


def test_anytime_unknown_n_in_interval():
    ds = generate_synthetic(6, 20, seed=8)
    f = train_dp_forest(ds, 5, 3, 5.0, 8)
    p = build_problem(f, "unknown_n")
    sol = solve_anytime(p, time_budget=3.0, seed=0)
    check_solution(p, sol)
    assert p.n_min <= sol.n <= p.n_max


def test_anytime_informed_keeps_known_rows():
    ds = generate_synthetic(6, 20, seed=9)
    f = train_dp_forest(ds, 3, 3, 30.0, 9)
    p = build_problem(f, "informed", n=20, known_rows=ds.subset(range(19)))
    sol = solve_anytime(p, time_budget=3.0, seed=0)
    check_solution(p, sol)
    assert (sol.rows[:19] == ds.rows[:19]).all()


# ------------------------------------------------------------ checker and io


def test_checker_catches_tampering():
    ds, f = tiny_forest(1, n=4)
    p = build_problem(f, "full", n=4)
    sol = make_solution(p, ds.rows, ds.labels)
    check_solution(p, sol)
    bad_counts = sol.derived_counts.copy()
    bad_counts[0] += 1
    with pytest.raises(ConstraintViolation):
        check_solution(p, dataclasses.replace(sol, derived_counts=bad_counts))
    with pytest.raises(ConstraintViolation):
        check_solution(p, dataclasses.replace(sol, loglik=sol.loglik + 0.5))
    with pytest.raises(ConstraintViolation):
        check_solution(p, dataclasses.replace(sol, hard_feasible=not sol.hard_feasible))
    with pytest.raises(ConstraintViolation):
        check_solution(p, dataclasses.replace(sol, rows=sol.rows[:3], labels=sol.labels[:3]))
    flipped = sol.rows.copy()
    root = f.trees[0].nodes[0].attribute
    flipped[0, root] ^= 1
    with pytest.raises(ConstraintViolation):
        check_solution(p, dataclasses.replace(sol, rows=flipped))


def test_checker_catches_one_hot_breach():
    ds = generate_synthetic(4, 3, seed=0, group_layout=(2,))
    f = train_dp_forest(ds, 2, 2, 2.0, 0)
    p = build_problem(f, "full", n=3)
    rows = ds.rows.copy()
    rows[0, :2] = 1
    sol = make_solution(p, rows, ds.labels)
    with pytest.raises(ConstraintViolation):
        check_solution(p, sol)


def test_true_dataset_scores_as_its_own_noise():
    ds, f = tiny_forest(5, m=5, n=8, trees=3, depth=3)
    p = build_problem(f, "full", n=8)
    sol = make_solution(p, ds.rows, ds.labels)
    expect = np.concatenate([(t.noisy_counts - t.true_counts).ravel() for t in f.trees])
    assert (sol.deltas == expect).all()


@settings(max_examples=25)
@given(seed=st.integers(0, 10**6))
def test_extract_is_a_sorted_permutation(seed):
    rng = np.random.default_rng(seed)
    ds, f = tiny_forest(0, m=4, n=5)
    p = build_problem(f, "full", n=5)
    rows = rng.integers(0, 2, size=(5, 4))
    labels = rng.integers(0, 2, size=5)
    rec = extract_reconstruction(make_solution(p, rows, labels), num_classes=2)
    keys = [tuple(r) + (y,) for r, y in zip(rec.rows.tolist(), rec.labels.tolist())]
    assert keys == sorted(tuple(r) + (y,) for r, y in zip(rows.tolist(), labels.tolist()))


def test_solution_round_trip(tmp_path):
    ds, f = tiny_forest(1, n=4)
    p = build_problem(f, "full", n=4)
    sol = solve_exact(p)
    save_solution(sol, p, tmp_path / "s.json")
    save_trace(sol.trace, tmp_path / "t.csv")
    rec, meta = load_solution_dataset(tmp_path / "s.json")
    assert (rec.rows == sol.rows).all() and meta["certified_optimal"] is True
    assert meta["threat_model"] == "full"
    assert (tmp_path / "t.csv").read_text().startswith("wall_time,objective,hard_feasible")
