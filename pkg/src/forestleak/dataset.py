"""Binary datasets: the object a forest is trained on and the attack tries to recover."""

from __future__ import annotations

import csv
import gzip
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np


DATA_DIR_ENV = "FORESTLEAK_DATA_DIR"


class DatasetError(ValueError):
    """Raised on malformed input data or inconsistent encodings."""


@dataclass(frozen=True)
class OneHotGroup:
    """Columns that jointly one-hot encode a single original feature."""

    attribute_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.attribute_indices)
        if len(set(idx)) != len(idx):
            raise DatasetError(f"duplicate indices in one-hot group {idx}")
        object.__setattr__(self, "attribute_indices", idx)

    def __len__(self) -> int:
        return len(self.attribute_indices)

    def __iter__(self):
        return iter(self.attribute_indices)


def validate_groups(groups: Sequence[OneHotGroup], m: int) -> None:
    seen: set[int] = set()
    for g in groups:
        for i in g.attribute_indices:
            if not 0 <= i < m:
                raise DatasetError(f"group index {i} outside [0, {m})")
            if i in seen:
                raise DatasetError(f"attribute {i} belongs to more than one group")
            seen.add(i)


def one_hot_valid(rows: np.ndarray, groups: Sequence[OneHotGroup]) -> np.ndarray:
    """Boolean mask of rows that set exactly one attribute in every group."""
    rows = np.atleast_2d(rows)
    ok = np.ones(rows.shape[0], dtype=bool)
    for g in groups:
        ok &= rows[:, list(g.attribute_indices)].sum(axis=1) == 1
    return ok


@dataclass(frozen=True)
class BinaryDataset:
    """N binary attribute vectors with class labels and one-hot metadata.

    ``heldout`` optionally carries the rows of the source dataset that were not
    sampled into this one (the pool used for privacy-leak estimates).
    """

    rows: np.ndarray
    labels: np.ndarray
    num_classes: int
    groups: tuple[OneHotGroup, ...] = ()
    feature_names: tuple[str, ...] | None = None
    heldout: BinaryDataset | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows)
        if rows.ndim == 1 and rows.size == 0:
            rows = rows.reshape(0, 0)
        if rows.ndim != 2:
            raise DatasetError(f"rows must be a 2-D array, got shape {rows.shape}")
        if rows.size and not np.isin(rows, (0, 1)).all():
            raise DatasetError("rows must contain only 0/1 values")
        rows = rows.astype(np.uint8, copy=True)
        rows.setflags(write=False)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1).copy()
        labels.setflags(write=False)
        if labels.shape[0] != rows.shape[0]:
            raise DatasetError(f"{rows.shape[0]} rows but {labels.shape[0]} labels")
        if int(self.num_classes) < 2:
            raise DatasetError("num_classes must be >= 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError("label outside [0, num_classes)")
        groups = tuple(g if isinstance(g, OneHotGroup) else OneHotGroup(tuple(g)) for g in self.groups)
        validate_groups(groups, rows.shape[1])
        if rows.shape[0] and not one_hot_valid(rows, groups).all():
            bad = int(np.flatnonzero(~one_hot_valid(rows, groups))[0])
            raise DatasetError(f"row {bad} violates one-hot encoding")
        if self.feature_names is not None and len(self.feature_names) != rows.shape[1]:
            raise DatasetError("feature_names length does not match number of columns")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "groups", groups)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int] | np.ndarray) -> BinaryDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return BinaryDataset(self.rows[idx], self.labels[idx], self.num_classes, self.groups, self.feature_names)

    def with_rows(self, rows: np.ndarray, labels: np.ndarray) -> BinaryDataset:
        """Same schema, different content."""
        return BinaryDataset(rows, labels, self.num_classes, self.groups, self.feature_names)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "n": self.n,
            "m": self.m,
            "num_classes": self.num_classes,
            "groups": [list(g.attribute_indices) for g in self.groups],
            "rows": self.rows.tolist(),
            "labels": self.labels.tolist(),
        }
        if self.feature_names is not None:
            out["feature_names"] = list(self.feature_names)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BinaryDataset:
        m = int(data["m"])
        rows = np.asarray(data["rows"], dtype=np.uint8).reshape(-1, m)
        if rows.shape[0] != int(data["n"]):
            raise DatasetError("record 'n' does not match number of rows")
        return cls(
            rows,
            np.asarray(data["labels"], dtype=np.int64),
            int(data["num_classes"]),
            tuple(OneHotGroup(tuple(g)) for g in data.get("groups", [])),
            tuple(data["feature_names"]) if data.get("feature_names") else None,
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path: str | Path) -> BinaryDataset:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DatasetSpec:
    """Where a training set comes from and how it is sampled."""

    source: str | Mapping[str, Any]
    n_train: int
    seed: int = 0
    label_column: str | None = None
    group_spec: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.n_train < 1:
            raise DatasetError("n_train must be >= 1")


# --------------------------------------------------------------------- loading


def _parse_binary(value: str, column: str, lineno: int, positive: str | None) -> int:
    v = value.strip()
    if positive is not None:
        return int(v == positive)
    if v in ("0", "1"):
        return int(v)
    try:
        f = float(v)
    except ValueError:
        f = None
    if f in (0.0, 1.0):
        return int(f)
    raise DatasetError(f"line {lineno}: non-binary value {value!r} in column {column!r}")


def _bin_labels(edges: Sequence[float]) -> list[str]:
    e = [float(x) for x in edges]
    names = [f"<{e[0]:g}"]
    names += [f"[{a:g},{b:g})" for a, b in zip(e[:-1], e[1:])]
    names.append(f">={e[-1]:g}")
    return names


def load_csv(
    path: str | Path,
    label_column: str,
    group_spec: Mapping[str, Mapping[str, Any]] | None = None,
    *,
    label_values: Sequence[str] | None = None,
    usecols: Sequence[str] | None = None,
) -> BinaryDataset:
    """Read a header-first CSV and binarize it.

    ``group_spec`` maps column names to an encoding::

        {"type": "binary", "positive": "F"}            # one column, 1 iff value == positive
        {"type": "threshold", "above": 3}              # one column, 1 iff value > above
        {"type": "categorical", "levels": [...], "map": {raw: level}}
        {"type": "continuous", "edges": [e1, ..., ek]} # k+1 bins, one-hot

    Columns absent from ``group_spec`` must already hold 0/1 values. Categorical
    levels default to first-seen order. ``usecols`` restricts (and orders) the
    feature columns; by default every non-label column is used.
    """
    group_spec = dict(group_spec or {})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        records = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DatasetError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
            records.append((lineno, rec))
    if label_column not in header:
        raise DatasetError(f"label column {label_column!r} not in header")
    label_pos = header.index(label_column)
    features = list(usecols) if usecols is not None else [h for h in header if h != label_column]
    for name in list(features) + list(group_spec):
        if name not in header:
            raise DatasetError(f"column {name!r} not in header")

    # label ids
    raw_labels = [rec[label_pos].strip() for _, rec in records]
    if label_values is None:
        levels = sorted(set(raw_labels), key=_natural_key)
    else:
        levels = [str(v) for v in label_values]
    label_ids = {v: i for i, v in enumerate(levels)}
    labels = []
    for (lineno, _), v in zip(records, raw_labels):
        if v not in label_ids:
            raise DatasetError(f"line {lineno}: unknown label value {v!r}")
        labels.append(label_ids[v])

    columns: list[np.ndarray] = []
    names: list[str] = []
    groups: list[OneHotGroup] = []
    for name in features:
        pos = header.index(name)
        enc = dict(group_spec.get(name, {"type": "binary"}))
        kind = enc.get("type", "binary")
        raw = [rec[pos].strip() for _, rec in records]
        if kind == "binary":
            positive = enc.get("positive")
            columns.append(np.array([_parse_binary(v, name, ln, positive) for (ln, _), v in zip(records, raw)]))
            names.append(name if positive is None else f"{name}={positive}")
        elif kind == "threshold":
            above = float(enc["above"])
            try:
                vals = np.array([float(v) for v in raw])
            except ValueError as exc:
                raise DatasetError(f"column {name!r}: {exc}") from None
            columns.append((vals > above).astype(np.uint8))
            names.append(f"{name}>{above:g}")
        elif kind == "categorical":
            mapping = {str(k): str(v) for k, v in enc.get("map", {}).items()}
            mapped = [mapping.get(v, v) for v in raw]
            cat_levels = [str(x) for x in enc["levels"]] if "levels" in enc else list(dict.fromkeys(mapped))
            lookup = {lv: j for j, lv in enumerate(cat_levels)}
            start = len(names)
            block = np.zeros((len(records), len(cat_levels)), dtype=np.uint8)
            for r, ((ln, _), v) in enumerate(zip(records, mapped)):
                if v not in lookup:
                    raise DatasetError(f"line {ln}: value {v!r} not a declared level of {name!r}")
                block[r, lookup[v]] = 1
            columns.extend(block.T)
            names.extend(f"{name}={lv}" for lv in cat_levels)
            groups.append(OneHotGroup(tuple(range(start, start + len(cat_levels)))))
        elif kind == "continuous":
            edges = [float(e) for e in enc["edges"]]
            if sorted(edges) != edges:
                raise DatasetError(f"column {name!r}: bin edges must be increasing")
            try:
                vals = np.array([float(v) for v in raw])
            except ValueError as exc:
                raise DatasetError(f"column {name!r}: {exc}") from None
            bins = np.digitize(vals, edges)
            start = len(names)
            block = np.zeros((len(records), len(edges) + 1), dtype=np.uint8)
            block[np.arange(len(records)), bins] = 1
            columns.extend(block.T)
            names.extend(f"{name}{lab}" for lab in _bin_labels(edges))
            groups.append(OneHotGroup(tuple(range(start, start + len(edges) + 1))))
        else:
            raise DatasetError(f"column {name!r}: unknown encoding type {kind!r}")

    rows = np.stack(columns, axis=1) if columns else np.zeros((len(records), 0), dtype=np.uint8)
    return BinaryDataset(rows, np.array(labels, dtype=np.int64), max(2, len(levels)), tuple(groups), tuple(names))


def _natural_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


# -------------------------------------------------------------------- sampling


def sample_training_set(dataset: BinaryDataset, n: int, seed: int) -> BinaryDataset:
    """Uniform sample of ``n`` rows without replacement; the rest becomes ``heldout``."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    if n > dataset.n:
        raise DatasetError(f"cannot sample {n} rows from a dataset of {dataset.n}")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    train = dataset.subset(perm[:n])
    pool = dataset.subset(perm[n:])
    return BinaryDataset(
        train.rows, train.labels, dataset.num_classes, dataset.groups, dataset.feature_names, heldout=pool
    )


def generate_synthetic(
    m_features: int,
    n_rows: int,
    class_balance: float = 0.5,
    group_layout: Sequence[int] = (),
    seed: int = 0,
    *,
    separable: bool = False,
) -> BinaryDataset:
    """Draw rows from a seeded product-of-Bernoullis model, one per class.

    The first ``sum(group_layout)`` columns form consecutive one-hot groups whose
    level is drawn categorically. With ``separable=True`` labels are instead set by
    a fixed linear rule on the drawn rows, so the class is a function of the row.
    """
    if m_features < 1 or n_rows < 0:
        raise DatasetError("need m_features >= 1 and n_rows >= 0")
    if not 0.0 < class_balance < 1.0:
        raise DatasetError("class_balance must lie in (0, 1)")
    layout = [int(s) for s in group_layout]
    if any(s < 2 for s in layout) or sum(layout) > m_features:
        raise DatasetError(f"group layout {layout} inconsistent with m_features={m_features}")
    rng = np.random.default_rng(seed)
    n_grouped = sum(layout)
    # fixed per-class model parameters
    bern = rng.uniform(0.1, 0.9, size=(2, m_features - n_grouped))
    cats = [rng.dirichlet(np.ones(s), size=2) for s in layout]

    labels = (rng.random(n_rows) < class_balance).astype(np.int64)
    rows = np.zeros((n_rows, m_features), dtype=np.uint8)
    groups = []
    col = 0
    for size, probs in zip(layout, cats):
        for c in (0, 1):
            sel = np.flatnonzero(labels == c)
            picks = rng.choice(size, size=sel.size, p=probs[c])
            rows[sel, col + picks] = 1
        groups.append(OneHotGroup(tuple(range(col, col + size))))
        col += size
    free = rng.random((n_rows, m_features - n_grouped))
    rows[:, col:] = free < bern[labels]
    if separable and n_rows:
        w = rng.normal(size=m_features)
        score = rows @ w
        cut = np.quantile(score, 1.0 - class_balance)
        labels = (score > cut).astype(np.int64)
    names = tuple(f"x{i}" for i in range(m_features))
    return BinaryDataset(rows, labels, 2, tuple(groups), names)


# -------------------------------------------------------------------- bundled


def builtin_recipes() -> dict[str, dict[str, Any]]:
    from importlib import resources

    return json.loads(resources.files("forestleak.data").joinpath("recipes.json").read_text())


def load_builtin(name: str) -> BinaryDataset:
    """One of the bundled tabular datasets, binarized by its recipe."""
    from importlib import resources

    recipes = builtin_recipes()
    if name not in recipes:
        raise DatasetError(f"unknown bundled dataset {name!r}; available: {sorted(recipes)}")
    r = recipes[name]
    if r.get("external"):
        # not redistributable with the package; look in the user's data directory
        root = os.environ.get(DATA_DIR_ENV)
        path = Path(root) / r["file"] if root else None
        if path is None or not path.exists():
            raise DatasetError(f"dataset {name!r} is not bundled: place {r['file']} in the directory "
                               f"named by {DATA_DIR_ENV}")
        return _load_recipe(path, r)
    with resources.as_file(resources.files("forestleak.data").joinpath(r["file"])) as path:
        return _load_recipe(path, r)


def _load_recipe(path: Path, r: Mapping[str, Any]) -> BinaryDataset:
    return load_csv(path, r["label_column"], r["group_spec"], label_values=r.get("label_values"),
                    usecols=r.get("usecols"))
