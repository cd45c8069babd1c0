"""Differentially private random forests with randomized structure and noisy leaf counts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .dataset import BinaryDataset, OneHotGroup
from .noise import as_fraction, laplace_int_noise

INF = math.inf


@dataclass(frozen=True)
class TreeNode:
    """Internal node (``attribute`` set) or leaf (``leaf_index`` set).

    An example goes left when its ``attribute`` equals 1.
    """

    attribute: int | None = None
    left: int | None = None
    right: int | None = None
    leaf_index: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.attribute is None


@dataclass(frozen=True)
class DecisionTree:
    nodes: tuple[TreeNode, ...]
    depth: int
    num_classes: int
    true_counts: np.ndarray | None = None  # (leaves, classes)
    noisy_counts: np.ndarray | None = None
    positive_splits: tuple[frozenset[int], ...] = field(init=False)
    negative_splits: tuple[frozenset[int], ...] = field(init=False)

    def __post_init__(self) -> None:
        pos: dict[int, frozenset[int]] = {}
        neg: dict[int, frozenset[int]] = {}
        stack = [(0, frozenset(), frozenset())]
        while stack:
            nid, p, q = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf:
                pos[node.leaf_index] = p
                neg[node.leaf_index] = q
                continue
            a = node.attribute
            if a in p or a in q:
                raise ValueError(f"attribute {a} appears twice on a root-to-leaf path")
            if node.left == node.right:
                raise ValueError("internal node must reference two distinct children")
            stack.append((node.left, p | {a}, q))
            stack.append((node.right, p, q | {a}))
        if sorted(pos) != list(range(len(pos))):
            raise ValueError("leaf indices must be 0..L-1 in some order")
        object.__setattr__(self, "positive_splits", tuple(pos[i] for i in range(len(pos))))
        object.__setattr__(self, "negative_splits", tuple(neg[i] for i in range(len(neg))))
        for name in ("true_counts", "noisy_counts"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64).reshape(self.num_leaves, self.num_classes).copy()
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.true_counts is not None and (self.true_counts < 0).any():
            raise ValueError("true counts must be non-negative")

    @property
    def num_leaves(self) -> int:
        return len(self.positive_splits)

    def route(self, row: Sequence[int] | np.ndarray) -> int:
        nid = 0
        node = self.nodes[0]
        while not node.is_leaf:
            nid = node.left if row[node.attribute] else node.right
            node = self.nodes[nid]
        return node.leaf_index

    def route_many(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        attr, left, right, leaf = self.arrays()
        cur = np.zeros(rows.shape[0], dtype=np.int64)
        for _ in range(self.depth + 1):
            a = attr[cur]
            internal = a >= 0
            if not internal.any():
                break
            idx = np.flatnonzero(internal)
            go_left = rows[idx, a[idx]] == 1
            cur[idx] = np.where(go_left, left[cur[idx]], right[cur[idx]])
        return leaf[cur]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        attr = np.array([-1 if n.is_leaf else n.attribute for n in self.nodes], dtype=np.int64)
        left = np.array([-1 if n.is_leaf else n.left for n in self.nodes], dtype=np.int64)
        right = np.array([-1 if n.is_leaf else n.right for n in self.nodes], dtype=np.int64)
        leaf = np.array([-1 if n.leaf_index is None else n.leaf_index for n in self.nodes], dtype=np.int64)
        return attr, left, right, leaf

    def to_dict(self, include_true: bool = True) -> dict[str, Any]:
        nodes = []
        for n in self.nodes:
            if n.is_leaf:
                rec: dict[str, Any] = {"kind": "leaf", "leaf": n.leaf_index}
                if include_true and self.true_counts is not None:
                    rec["true_counts"] = self.true_counts[n.leaf_index].tolist()
                if self.noisy_counts is not None:
                    rec["noisy_counts"] = self.noisy_counts[n.leaf_index].tolist()
            else:
                rec = {"kind": "internal", "attribute": n.attribute, "left": n.left, "right": n.right}
            nodes.append(rec)
        return {"depth": self.depth, "nodes": nodes}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], num_classes: int) -> DecisionTree:
        nodes = []
        leaves: dict[int, dict] = {}
        for rec in data["nodes"]:
            if rec["kind"] == "leaf":
                nodes.append(TreeNode(leaf_index=int(rec["leaf"])))
                leaves[int(rec["leaf"])] = rec
            else:
                nodes.append(TreeNode(int(rec["attribute"]), int(rec["left"]), int(rec["right"])))
        order = [leaves[i] for i in range(len(leaves))]
        true = np.array([r["true_counts"] for r in order]) if order and "true_counts" in order[0] else None
        noisy = np.array([r["noisy_counts"] for r in order]) if order and "noisy_counts" in order[0] else None
        return cls(tuple(nodes), int(data["depth"]), num_classes, true, noisy)


def _eligible(m: int, groups: Sequence[OneHotGroup], pos: set[int], neg: set[int]) -> list[int]:
    blocked = pos | neg
    for g in groups:
        members = g.attribute_indices
        if any(i in pos for i in members):
            blocked.update(members)
        else:
            open_ = [i for i in members if i not in neg]
            if len(open_) <= 1:
                # last open member is implied to be 1
                blocked.update(members)
    return [i for i in range(m) if i not in blocked]


def build_random_tree(
    m_features: int,
    groups: Sequence[OneHotGroup],
    depth: int,
    rng: np.random.Generator,
    num_classes: int = 2,
) -> DecisionTree:
    """Grow a data-independent tree, splitting on uniformly chosen eligible attributes."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not _eligible(m_features, groups, set(), set()):
        raise ValueError("no attribute is eligible for the root split")
    nodes: list[TreeNode | None] = []
    leaf_count = 0

    def grow(level: int, pos: set[int], neg: set[int]) -> int:
        nonlocal leaf_count
        nid = len(nodes)
        nodes.append(None)
        cand = _eligible(m_features, groups, pos, neg) if level < depth else []
        if not cand:
            nodes[nid] = TreeNode(leaf_index=leaf_count)
            leaf_count += 1
            return nid
        a = int(cand[rng.integers(len(cand))])
        left = grow(level + 1, pos | {a}, neg)
        right = grow(level + 1, pos, neg | {a})
        nodes[nid] = TreeNode(a, left, right)
        return nid

    grow(0, set(), set())
    return DecisionTree(tuple(nodes), depth, num_classes)


def route_example(tree: DecisionTree, row: Sequence[int] | np.ndarray) -> int:
    return tree.route(row)


def compute_true_counts(tree: DecisionTree, dataset: BinaryDataset) -> DecisionTree:
    counts = np.zeros((tree.num_leaves, dataset.num_classes), dtype=np.int64)
    if dataset.n:
        leaves = tree.route_many(dataset.rows)
        np.add.at(counts, (leaves, dataset.labels), 1)
    return replace(tree, num_classes=dataset.num_classes, true_counts=counts)


def _parse_epsilon(epsilon) -> Fraction | float:
    if isinstance(epsilon, str):
        if epsilon.strip().lower() in ("inf", "infinity", "∞"):
            return INF
        epsilon = Fraction(epsilon.strip())
    if isinstance(epsilon, float) and math.isinf(epsilon):
        return INF
    frac = as_fraction(epsilon)
    if frac <= 0:
        raise ValueError(f"epsilon must be positive or 'inf', got {epsilon}")
    return frac


@dataclass(frozen=True)
class Forest:
    """Trees plus the privacy budget. ``epsilon_total`` is a Fraction or ``math.inf``."""

    trees: tuple[DecisionTree, ...]
    epsilon_total: Fraction | float
    num_classes: int
    num_features: int
    depth: int
    n_train_true: int | None = None
    groups: tuple[OneHotGroup, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "epsilon_total", _parse_epsilon(self.epsilon_total))
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(
            self, "groups", tuple(g if isinstance(g, OneHotGroup) else OneHotGroup(tuple(g)) for g in self.groups)
        )
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def infinite_budget(self) -> bool:
        return self.epsilon_total == INF

    @property
    def epsilon_per_leaf(self) -> Fraction | float:
        if self.infinite_budget:
            return INF
        return self.epsilon_total / self.num_trees

    @property
    def has_true_counts(self) -> bool:
        return all(t.true_counts is not None for t in self.trees)

    def attacker_view(self) -> Forest:
        """Structure and noisy counts only."""
        trees = tuple(replace(t, true_counts=None) for t in self.trees)
        return replace(self, trees=trees, n_train_true=None)

    def to_dict(self, include_true: bool = True) -> dict[str, Any]:
        eps = "inf" if self.infinite_budget else float(self.epsilon_total)
        out: dict[str, Any] = {
            "num_trees": self.num_trees,
            "depth": self.depth,
            "epsilon_total": eps,
            "epsilon_total_exact": "inf" if self.infinite_budget else str(self.epsilon_total),
            "epsilon_per_leaf": "inf" if self.infinite_budget else float(self.epsilon_per_leaf),
            "num_classes": self.num_classes,
            "num_features": self.num_features,
            "groups": [list(g.attribute_indices) for g in self.groups],
            "trees": [t.to_dict(include_true) for t in self.trees],
        }
        if include_true and self.n_train_true is not None:
            out["n_train_true"] = self.n_train_true
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Forest:
        eps = data.get("epsilon_total_exact", data["epsilon_total"])
        eps = INF if eps == "inf" else (Fraction(eps) if isinstance(eps, str) else eps)
        trees = tuple(DecisionTree.from_dict(t, int(data["num_classes"])) for t in data["trees"])
        groups = tuple(OneHotGroup(tuple(g)) for g in data.get("groups", []))
        return cls(trees, eps, int(data["num_classes"]), int(data["num_features"]), int(data["depth"]),
                   data.get("n_train_true"), groups)

    def save_json(self, path: str | Path, include_true: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_true)))

    @classmethod
    def load_json(cls, path: str | Path) -> Forest:
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_dp_forest(
    dataset: BinaryDataset,
    num_trees: int,
    depth: int,
    epsilon_total: float | str | Fraction,
    rng: np.random.Generator | int,
) -> Forest:
    """Random structure, exact counts on the full dataset, Laplace-noised integer counts.

    Each (tree, leaf, class) count gets int(Lap(|T|/epsilon)) added; with an
    infinite budget the noisy counts equal the true ones.
    """
    if num_trees < 1:
        raise ValueError("num_trees must be >= 1")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    eps = _parse_epsilon(epsilon_total)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    eps_v = INF if eps == INF else eps / num_trees
    trees = []
    for _ in range(num_trees):
        tree = build_random_tree(dataset.m, dataset.groups, depth, rng, dataset.num_classes)
        tree = compute_true_counts(tree, dataset)
        noise = laplace_int_noise(float(eps_v), rng, size=tree.true_counts.shape)
        trees.append(replace(tree, noisy_counts=tree.true_counts + noise))
    return Forest(tuple(trees), eps, dataset.num_classes, dataset.m, depth, dataset.n, dataset.groups)


def predict_soft_voting(forest: Forest, row: Sequence[int] | np.ndarray, mode: str = "noisy") -> tuple[int, np.ndarray]:
    """Average of per-tree normalized leaf class frequencies; ties go to the lowest class id."""
    probs = predict_proba(forest, np.atleast_2d(np.asarray(row)), mode)[0]
    return int(np.argmax(probs)), probs


def predict_proba(forest: Forest, rows: np.ndarray, mode: str = "noisy") -> np.ndarray:
    if mode not in ("true", "noisy"):
        raise ValueError("mode must be 'true' or 'noisy'")
    rows = np.atleast_2d(rows)
    total = np.zeros((rows.shape[0], forest.num_classes))
    uniform = np.full(forest.num_classes, 1.0 / forest.num_classes)
    for tree in forest.trees:
        counts = tree.true_counts if mode == "true" else tree.noisy_counts
        if counts is None:
            raise ValueError(f"tree has no {mode} counts")
        counts = counts.astype(np.float64)
        sums = counts.sum(axis=1)
        # non-positive leaf totals (possible after noise) vote uniformly
        bad = (sums <= 0) | (counts < 0).any(axis=1)
        freq = np.where(bad[:, None], uniform, counts / np.where(sums > 0, sums, 1.0)[:, None])
        total += freq[tree.route_many(rows)]
    return total / forest.num_trees


def accuracy(forest: Forest, dataset: BinaryDataset, mode: str = "noisy") -> float:
    if dataset.n == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = predict_proba(forest, dataset.rows, mode).argmax(axis=1)
    return float((pred == dataset.labels).mean())


# ------------------------------------------------------------ gaussian budget


@dataclass(frozen=True)
class GaussianBudget:
    epsilon_v: float
    delta_v: float
    sigma: float
    composition: str
    delta_prime: float | None = None
    epsilon_total: float = 0.0
    delta_total: float = 0.0


def gaussian_sigma(epsilon_v: float, delta_v: float) -> float:
    """Std of the Gaussian mechanism at sensitivity 1: sqrt(2 ln(1.25/delta_v)) / epsilon_v."""
    if not epsilon_v > 0 or math.isinf(epsilon_v):
        raise ValueError(f"epsilon_v must be positive and finite, got {epsilon_v}")
    if not 0.0 < delta_v < 1.0:
        raise ValueError(f"delta_v must lie in (0, 1), got {delta_v}")
    return math.sqrt(2.0 * math.log(1.25 / delta_v)) / epsilon_v


def compose_budget(
    eps_v: float,
    delta_v: float,
    num_trees: int,
    mode: str = "basic",
    delta_prime: float | None = None,
) -> tuple[float, float]:
    """Total (epsilon, delta) after running ``num_trees`` mechanisms on the same data."""
    if num_trees < 1:
        raise ValueError("num_trees must be >= 1")
    if not eps_v > 0 or not 0.0 <= delta_v < 1.0:
        raise ValueError("need eps_v > 0 and 0 <= delta_v < 1")
    t = num_trees
    if mode == "basic":
        return t * eps_v, t * delta_v
    if mode == "advanced":
        if delta_prime is None or not 0.0 < delta_prime < 1.0:
            raise ValueError("advanced composition needs 0 < delta_prime < 1")
        eps = math.sqrt(2.0 * t * math.log(1.0 / delta_prime)) * eps_v + t * eps_v * math.expm1(eps_v)
        return eps, t * delta_v + delta_prime
    raise ValueError(f"unknown composition mode {mode!r}")


def laplace_std(epsilon_v: float) -> float:
    """Standard deviation of Lap(1/epsilon_v)."""
    return math.sqrt(2.0) / epsilon_v


def per_mechanism_budget(
    epsilon_total: float, delta_total: float, num_trees: int, mode: str
) -> GaussianBudget:
    """Largest per-tree (epsilon_v, delta_v) whose composition fits the total budget.

    Basic splits both evenly. Advanced gives half of delta to delta' and the other
    half evenly to the trees, then solves the composition bound for epsilon_v.
    """
    from scipy.optimize import brentq

    if mode == "basic":
        eps_v, delta_v, dprime = epsilon_total / num_trees, delta_total / num_trees, None
    elif mode == "advanced":
        dprime = delta_total / 2.0
        delta_v = delta_total / (2.0 * num_trees)

        def gap(e: float) -> float:
            return compose_budget(e, delta_v, num_trees, "advanced", dprime)[0] - epsilon_total

        hi = epsilon_total
        while gap(hi) < 0:
            hi *= 2.0
        eps_v = brentq(gap, 1e-12, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    else:
        raise ValueError(f"unknown composition mode {mode!r}")
    tot = compose_budget(eps_v, delta_v, num_trees, mode, dprime)
    return GaussianBudget(eps_v, delta_v, gaussian_sigma(eps_v, delta_v), mode, dprime, tot[0], tot[1])


def noise_comparison_table(epsilon_total: float, delta_total: float, num_trees: int) -> list[dict[str, Any]]:
    """Laplace vs Gaussian per-count noise std under basic and advanced composition."""
    lap_eps_v = epsilon_total / num_trees
    rows = []
    for mode in ("basic", "advanced"):
        g = per_mechanism_budget(epsilon_total, delta_total, num_trees, mode)
        rows.append({
            "composition": mode,
            "num_trees": num_trees,
            "epsilon_total": epsilon_total,
            "delta_total": delta_total,
            "laplace_epsilon_v": lap_eps_v,
            "laplace_scale": 1.0 / lap_eps_v,
            "laplace_std": laplace_std(lap_eps_v),
            "gaussian_epsilon_v": g.epsilon_v,
            "gaussian_delta_v": g.delta_v,
            "delta_prime": g.delta_prime,
            "gaussian_sigma": g.sigma,
            "composed_epsilon": g.epsilon_total,
            "composed_delta": g.delta_total,
        })
    return rows
