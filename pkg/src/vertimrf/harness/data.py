"""CSV ingestion, attribute splitting and the planted-correlation generator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import Dataset, DomainError, Schema


@dataclass(frozen=True)
class Domain:
    """Schema plus optional category labels per attribute."""

    schema: Schema
    categories: tuple[tuple[str, ...] | None, ...]

    @classmethod
    def load(cls, path: str | Path) -> "Domain":
        """Read ``{"attributes": [{"name", "size", "categories"?}, ...]}``.

        ``size`` may be omitted when ``categories`` is given.
        """
        spec = json.loads(Path(path).read_text())
        names, sizes, cats = [], [], []
        for item in spec["attributes"]:
            c = item.get("categories")
            size = item.get("size", len(c) if c else None)
            if size is None:
                raise ValueError(f"attribute {item.get('name')!r} needs a size or categories")
            if c is not None and len(c) != size:
                raise ValueError(f"attribute {item['name']!r}: {len(c)} categories for size {size}")
            names.append(item["name"])
            sizes.append(int(size))
            cats.append(tuple(str(x) for x in c) if c else None)
        return cls(Schema(tuple(names), tuple(sizes)), tuple(cats))

    @classmethod
    def plain(cls, schema: Schema) -> "Domain":
        return cls(schema, (None,) * schema.d)

    def to_json(self) -> dict:
        out = []
        for name, size, c in zip(self.schema.names, self.schema.sizes, self.categories):
            item = {"name": name, "size": size}
            if c:
                item["categories"] = list(c)
            out.append(item)
        return {"attributes": out}


def load_csv(path: str | Path, domain: Domain | str | Path) -> Dataset:
    """Read a headed CSV into an integer-coded dataset, validating every cell."""
    if not isinstance(domain, Domain):
        domain = Domain.load(domain)
    schema = domain.schema
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise ValueError(f"{path}: columns {missing} not found in header")
        cols = [header.index(n) for n in schema.names]
        lookup = [{c: i for i, c in enumerate(cat)} if cat else None for cat in domain.categories]
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            row = []
            for j, c in enumerate(cols):
                raw = rec[c].strip()
                name = schema.names[j]
                if lookup[j] is not None:
                    if raw not in lookup[j]:
                        raise DomainError(f"{path}:{line}: unknown category {raw!r} for attribute {name!r}")
                    v = lookup[j][raw]
                else:
                    try:
                        v = int(raw)
                    except ValueError:
                        raise ValueError(f"{path}:{line}: attribute {name!r} value {raw!r} is not an integer") from None
                if not 0 <= v < schema.sizes[j]:
                    raise DomainError(
                        f"{path}:{line}: attribute {name!r} value {v} outside [0, {schema.sizes[j]})")
                row.append(v)
            rows.append(row)
    return Dataset(schema, np.asarray(rows, dtype=np.int64).reshape(len(rows), schema.d))


def write_csv(path: str | Path, data: Dataset, domain: Domain | None = None) -> None:
    cats = domain.categories if domain is not None else (None,) * data.schema.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.schema.names)
        for row in data.rows:
            w.writerow([cats[j][v] if cats[j] else int(v) for j, v in enumerate(row)])


def split_attributes(schema: Schema, m: int, assignment: str | Sequence[Sequence[int]] = "uniform") -> list[list[int]]:
    """Partition attribute indices among ``m`` parties.

    ``"uniform"`` deals attributes round-robin; explicit lists are checked to
    be a partition of all attributes into ``m`` non-empty parts.
    """
    d = schema.d
    if isinstance(assignment, str):
        if assignment != "uniform":
            raise ValueError(f"unknown split strategy {assignment!r}")
        if not 1 <= m <= d:
            raise ValueError(f"cannot split {d} attributes among {m} parties")
        return [list(range(i, d, m)) for i in range(m)]
    parts = [sorted(int(a) for a in p) for p in assignment]
    if len(parts) != m:
        raise ValueError(f"{len(parts)} attribute lists given for {m} parties")
    flat = [a for p in parts for a in p]
    if len(flat) != len(set(flat)):
        raise ValueError("attribute lists overlap")
    if sorted(flat) != list(range(d)):
        raise ValueError("attribute lists do not cover every attribute")
    if any(not p for p in parts):
        raise ValueError("every party needs at least one attribute")
    return parts


# couplings are (parent, child, strength): child copies the parent w.p. strength
DEFAULT_COUPLINGS = ((0, 1, 0.8), (3, 4, 0.8), (1, 3, 0.8), (2, 5, 0.8))
DEFAULT_SPLIT = ((0, 1, 2), (3, 4, 5))


def planted_dataset(n: int, sizes: Sequence[int] = (2,) * 6,
                    couplings: Sequence[tuple[int, int, float]] = DEFAULT_COUPLINGS,
                    rng: np.random.Generator | None = None, skew: float = 0.4) -> Dataset:
    """Forest-structured synthetic table with known pairwise couplings.

    Attributes without a parent draw from ``p_v ∝ (1 - skew)^v``.  A child
    takes its parent's value (mod its own domain) with probability
    ``strength`` and a uniform value otherwise.  Parents must precede their
    children in index order.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    d = len(sizes)
    parent = {}
    for p, c, s in couplings:
        if not 0 <= p < c < d:
            raise ValueError(f"coupling {(p, c)}: parent must precede child")
        if c in parent:
            raise ValueError(f"attribute {c} has two parents")
        if not 0 <= s <= 1:
            raise ValueError("strength must lie in [0, 1]")
        parent[c] = (p, s)
    cols = []
    for j, u in enumerate(sizes):
        if j in parent:
            p, s = parent[j]
            copy = rng.random(n) < s
            cols.append(np.where(copy, cols[p] % u, rng.integers(0, u, n)))
        else:
            w = (1.0 - skew) ** np.arange(u)
            cols.append(rng.choice(u, size=n, p=w / w.sum()))
    names = tuple(f"a{j}" for j in range(d))
    rows = np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64)
    return Dataset(Schema(names, tuple(sizes)), rows)
