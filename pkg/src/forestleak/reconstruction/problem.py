"""What the attacker sees and knows, and how a candidate dataset is scored against it."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from ..dataset import BinaryDataset, OneHotGroup, one_hot_valid
from ..forest import DecisionTree, Forest
from ..noise import NoiseModel

logger = logging.getLogger(__name__)

THREAT_MODELS = ("full", "unknown_n", "partial", "informed")
INFORMED_ALPHA_PER_EPSILON = 20.0
# regularizer weight used when the budget is infinite and no alpha is given
INFORMED_ALPHA_INFINITE = 1e6


class ThreatModelError(ValueError):
    pass


@dataclass(frozen=True)
class ExactN:
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ThreatModelError("N must be >= 1")

    @property
    def n_min(self) -> int:
        return self.n

    @property
    def n_max(self) -> int:
        return self.n


@dataclass(frozen=True)
class NInterval:
    """Confidence interval on the training-set size derived from noisy totals."""

    n_star: float
    sigma_zeta: float
    t95: float
    n_min: int
    n_max: int
    per_tree_totals: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n_min < 1 or self.n_min > self.n_max:
            raise ValueError(f"invalid interval [{self.n_min}, {self.n_max}]")

    def contains(self, n: int) -> bool:
        return self.n_min <= n <= self.n_max


def estimate_n_interval(forest_view: Forest, noise_model: NoiseModel) -> NInterval:
    """Student-t interval around the mean per-tree noisy total."""
    totals = [int(t.noisy_counts.sum()) for t in forest_view.trees]
    n_trees = len(totals)
    n_star = float(np.mean(totals))
    if noise_model.infinite:
        sigma = 0.0
    else:
        leaves = max(t.num_leaves for t in forest_view.trees)
        sigma = math.sqrt(2.0 * leaves * forest_view.num_classes) / noise_model.epsilon_v
    if n_trees == 1:
        logger.warning("single tree: using the normal 1.96 instead of a Student coefficient")
        t95 = 1.96
    else:
        t95 = float(stats.t.ppf(0.975, n_trees - 1))
    half = t95 * sigma / math.sqrt(n_trees)
    n_min = max(1, math.floor(n_star - half))
    n_max = max(n_min, math.ceil(n_star + half))
    return NInterval(n_star, sigma, t95, n_min, n_max, tuple(totals))


def _frozen(mapping: Mapping[int, np.ndarray]) -> Mapping[int, np.ndarray]:
    out = {}
    for k, v in mapping.items():
        arr = np.asarray(v, dtype=np.uint8).copy()
        arr.setflags(write=False)
        out[int(k)] = arr
    return dict(sorted(out.items()))


@dataclass(frozen=True)
class ReconstructionProblem:
    """Forest structure, noisy counts and adversary knowledge.

    ``known_columns`` maps an attribute index to the true value of that attribute
    for every row (row order is fixed by this array). ``known_rows`` are complete
    examples the adversary already has; they occupy the first rows of every
    candidate solution.
    """

    trees: tuple[DecisionTree, ...]
    noise_model: NoiseModel
    num_classes: int
    num_features: int
    groups: tuple[OneHotGroup, ...]
    n_knowledge: ExactN | NInterval
    known_columns: Mapping[int, np.ndarray] = field(default_factory=dict)
    known_rows: BinaryDataset | None = None
    alpha: float = 0.0
    epsilon_total: float = math.inf
    threat_model: str = "full"

    def __post_init__(self) -> None:
        trees = tuple(self.trees)
        for t in trees:
            if t.noisy_counts is None:
                raise ThreatModelError("every tree needs noisy counts")
            if t.true_counts is not None:
                raise ThreatModelError("the attacker view must not carry true counts")
        object.__setattr__(self, "trees", trees)
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "known_columns", _frozen(self.known_columns))
        m = self.num_features
        for a, col in self.known_columns.items():
            if not 0 <= a < m:
                raise ThreatModelError(f"known column {a} outside [0, {m})")
            if not isinstance(self.n_knowledge, ExactN) or col.shape != (self.n_knowledge.n,):
                raise ThreatModelError("known columns need an exact N and one value per row")
        if self.known_columns:
            self._check_known_columns_one_hot()
        if self.known_rows is not None:
            if not isinstance(self.n_knowledge, ExactN):
                raise ThreatModelError("known rows need an exact N")
            if self.known_rows.n >= self.n_knowledge.n:
                raise ThreatModelError("at least one row must remain unknown")
            if self.known_rows.m != m:
                raise ThreatModelError("known rows have the wrong number of attributes")
        offsets = [0]
        for t in trees:
            offsets.append(offsets[-1] + t.num_leaves * self.num_classes)
        object.__setattr__(self, "_offsets", tuple(offsets))
        noisy = np.concatenate([t.noisy_counts.ravel() for t in trees]).astype(np.int64)
        noisy.setflags(write=False)
        object.__setattr__(self, "_noisy", noisy)

    def _check_known_columns_one_hot(self) -> None:
        for g in self.groups:
            known = [a for a in g.attribute_indices if a in self.known_columns]
            if not known:
                continue
            ones = sum(self.known_columns[a].astype(np.int64) for a in known)
            if (ones > 1).any():
                raise ThreatModelError(f"known columns set two members of group {g.attribute_indices}")
            if len(known) == len(g) and (ones != 1).any():
                raise ThreatModelError(f"known columns leave group {g.attribute_indices} empty")

    # ----------------------------------------------------------- cell layout

    @property
    def cell_offsets(self) -> tuple[int, ...]:
        return self._offsets

    @property
    def num_cells(self) -> int:
        return self._offsets[-1]

    @property
    def noisy_flat(self) -> np.ndarray:
        return self._noisy

    @property
    def n_min(self) -> int:
        return self.n_knowledge.n_min

    @property
    def n_max(self) -> int:
        return self.n_knowledge.n_max

    @property
    def num_known_rows(self) -> int:
        return 0 if self.known_rows is None else self.known_rows.n

    @property
    def informed(self) -> bool:
        return self.known_rows is not None

    def upper_bound(self) -> float | None:
        """Best conceivable objective (every noise guess 0), when no regularizer applies."""
        if self.informed:
            return None
        return self.num_cells * float(self.noise_model.log_pmf[self.noise_model.gamma])

    # --------------------------------------------------------------- scoring

    def leaves_of(self, rows: np.ndarray) -> np.ndarray:
        """(rows, trees) leaf index of every row in every tree."""
        rows = np.asarray(rows, dtype=np.uint8).reshape(-1, self.num_features)
        if rows.shape[0] == 0:
            return np.zeros((0, len(self.trees)), dtype=np.int64)
        return np.stack([t.route_many(rows) for t in self.trees], axis=1)

    def derived_counts(self, rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.zeros(self.num_cells, dtype=np.int64)
        leaves = self.leaves_of(rows)
        for ti in range(len(self.trees)):
            np.add.at(counts, self._offsets[ti] + leaves[:, ti] * self.num_classes + labels, 1)
        return counts

    def regularizer(self, rows: np.ndarray) -> float:
        """Sum over free rows of minus the mean Manhattan distance to the known rows."""
        if not self.informed:
            return 0.0
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.num_features)
        free = rows[self.num_known_rows:]
        if free.shape[0] == 0:
            return 0.0
        ones = self.known_rows.rows.sum(axis=0).astype(np.float64)
        k = self.known_rows.n
        # distance to all known rows is linear in x: sum_a (x_a ? k - ones_a : ones_a)
        dist = np.where(free == 1, k - ones, ones).sum(axis=1)
        return float(-(dist / k).sum())

    def objective_from_parts(self, loglik: float, regularizer: float) -> float:
        if not self.informed:
            return loglik
        return regularizer + self.alpha * loglik / self.num_cells

    def score(self, rows: np.ndarray, labels: np.ndarray) -> dict[str, Any]:
        counts = self.derived_counts(rows, labels)
        deltas = self._noisy - counts
        soft = float(self.noise_model.log_p_array(deltas, soft=True).sum())
        feasible = self.noise_model.hard_feasible(deltas)
        reg = self.regularizer(rows)
        return {
            "counts": counts,
            "deltas": deltas,
            "loglik": soft,
            "regularizer": reg,
            "objective": self.objective_from_parts(soft, reg),
            "hard_feasible": feasible,
        }

    # ------------------------------------------------------- row constraints

    def fixed_masks(self, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-row boolean mask of fixed attributes and their values."""
        fixed = np.zeros((n_rows, self.num_features), dtype=bool)
        values = np.zeros((n_rows, self.num_features), dtype=np.uint8)
        for a, col in self.known_columns.items():
            fixed[:, a] = True
            values[:, a] = col[:n_rows]
        k = self.num_known_rows
        if k:
            fixed[:k] = True
            values[:k] = self.known_rows.rows
        return fixed, values

    # ------------------------------------------------------------------ io

    def to_dict(self, forest_view: Forest | None = None) -> dict[str, Any]:
        threat: dict[str, Any] = {"threat_model": self.threat_model, "alpha": self.alpha}
        nk = self.n_knowledge
        if isinstance(nk, ExactN):
            threat["n"] = nk.n
        else:
            threat["n_interval"] = {
                "n_star": nk.n_star, "sigma_zeta": nk.sigma_zeta, "t95": nk.t95,
                "n_min": nk.n_min, "n_max": nk.n_max,
            }
        if self.known_columns:
            threat["known_columns"] = {str(a): v.tolist() for a, v in self.known_columns.items()}
        if self.known_rows is not None:
            threat["known_rows"] = self.known_rows.to_dict()
        out: dict[str, Any] = {"threat": threat, "gamma": self.noise_model.gamma}
        if forest_view is not None:
            out["forest"] = forest_view.attacker_view().to_dict(include_true=False)
        return out


def build_problem(
    forest_view: Forest,
    threat_model: str = "full",
    *,
    n: int | None = None,
    known_columns: Mapping[int, Sequence[int]] | None = None,
    known_rows: BinaryDataset | None = None,
    alpha: float | None = None,
    groups: Sequence[OneHotGroup] = (),
    gamma: int | None = None,
) -> ReconstructionProblem:
    """Assemble a reconstruction problem for one of the supported threat models.

    full: exact ``n``. unknown_n: interval estimated from the noisy totals.
    partial: exact ``n`` and ``known_columns`` (attribute -> per-row values).
    informed: exact ``n`` and ``known_rows`` (n - 1 rows in the usual setting);
    ``alpha`` defaults to 20 times the total budget.
    """
    if threat_model not in THREAT_MODELS:
        raise ThreatModelError(f"unknown threat model {threat_model!r}; expected one of {THREAT_MODELS}")
    if forest_view.has_true_counts or any(t.true_counts is not None for t in forest_view.trees):
        forest_view = forest_view.attacker_view()
    eps_v = forest_view.epsilon_per_leaf
    model = NoiseModel.from_epsilon(eps_v, gamma)
    if threat_model == "unknown_n":
        if n is not None:
            raise ThreatModelError("unknown_n threat model must not be given N")
        nk: ExactN | NInterval = estimate_n_interval(forest_view, model)
    else:
        if n is None:
            raise ThreatModelError(f"threat model {threat_model!r} needs N")
        nk = ExactN(int(n))
    cols: Mapping[int, Sequence[int]] = {}
    rows_known = None
    a = 0.0
    if threat_model == "partial":
        if not known_columns:
            raise ThreatModelError("partial threat model needs known columns")
        cols = known_columns
    elif known_columns:
        raise ThreatModelError("known columns only apply to the partial threat model")
    if threat_model == "informed":
        if known_rows is None or known_rows.n == 0:
            raise ThreatModelError("informed threat model needs known rows")
        if known_rows.num_classes != forest_view.num_classes:
            raise ThreatModelError("known rows disagree with the forest on the number of classes")
        rows_known = known_rows
        if alpha is None:
            eps = forest_view.epsilon_total
            a = INFORMED_ALPHA_INFINITE if eps == math.inf else INFORMED_ALPHA_PER_EPSILON * float(eps)
        else:
            a = float(alpha)
    elif known_rows is not None:
        raise ThreatModelError("known rows only apply to the informed threat model")
    if not groups:
        groups = forest_view.groups
    if known_rows is not None and known_rows.groups and tuple(groups) != tuple(known_rows.groups):
        raise ThreatModelError("known rows use a different one-hot layout")
    return ReconstructionProblem(
        trees=forest_view.trees,
        noise_model=model,
        num_classes=forest_view.num_classes,
        num_features=forest_view.num_features,
        groups=tuple(groups),
        n_knowledge=nk,
        known_columns={int(k): np.asarray(v) for k, v in cols.items()},
        known_rows=rows_known,
        alpha=a,
        epsilon_total=float(forest_view.epsilon_total),
        threat_model=threat_model,
    )


def rows_one_hot_valid(problem: ReconstructionProblem, rows: np.ndarray) -> bool:
    rows = np.asarray(rows).reshape(-1, problem.num_features)
    return bool(rows.shape[0] == 0 or one_hot_valid(rows, problem.groups).all())
