"""Rebuild the bundled raw-column extracts from the public source files.

Usage:
    python3 scripts/prepare_datasets.py --compas compas-scores-two-years.csv \
        --adult-train adult.data --adult-test adult.test
"""

from __future__ import annotations

import argparse
import csv
import gzip
import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "forestleak" / "data"
ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status", "occupation",
    "relationship", "race", "sex", "capital-gain", "capital-loss", "hours-per-week", "native-country", "income",
]


def _write(name: str, header: list[str], rows: list[list[str]]) -> None:
    # mtime=0 keeps the archive byte-identical across rebuilds
    with open(DATA / name, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
        lines = [",".join(header)] + [",".join(r) for r in rows]
        gz.write(("\n".join(lines) + "\n").encode("utf-8"))
    print(f"{name}: {len(rows)} rows")


def prepare_compas(src: Path, recipe: dict) -> None:
    cols = recipe["usecols"] + [recipe["label_column"]]
    with src.open(newline="", encoding="utf-8") as fh:
        rows = [[r[c].strip() for c in cols] for r in csv.DictReader(fh)]
    _write(recipe["file"], cols, rows)


def prepare_adult(train: Path, test: Path, recipe: dict) -> None:
    rows = []
    for path in (train, test):
        for line in path.read_text().splitlines():
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != len(ADULT_COLUMNS):
                continue  # blank lines and the test file's banner
            parts[-1] = parts[-1].rstrip(".")
            rows.append(parts)
    _write(recipe["file"], ADULT_COLUMNS, rows)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--compas", type=Path)
    ap.add_argument("--adult-train", type=Path)
    ap.add_argument("--adult-test", type=Path)
    args = ap.parse_args()
    recipes = json.loads((DATA / "recipes.json").read_text())
    if args.compas:
        prepare_compas(args.compas, recipes["compas"])
    if args.adult_train and args.adult_test:
        prepare_adult(args.adult_train, args.adult_test, recipes["adult"])


if __name__ == "__main__":
    main()
