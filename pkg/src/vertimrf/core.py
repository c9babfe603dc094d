"""Schemas, datasets, marginals and contingency histograms.

Attribute values are dense integer codes ``0..u_j-1``.  A marginal is an
ascending tuple of attribute indices, and every histogram over it is a flat
vector in row-major (first attribute most significant) cell order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """A value or index falls outside its declared domain."""


class ShapeError(ValueError):
    """Two histograms that should align do not."""


class DegenerateInputError(ValueError):
    """An input has no mass to normalize."""


@dataclass(frozen=True)
class Schema:
    names: tuple[str, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "sizes", tuple(int(u) for u in self.sizes))
        if len(self.names) == 0:
            raise ValueError("schema needs at least one attribute")
        if len(self.names) != len(self.sizes):
            raise ValueError("names and sizes differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("attribute names must be unique")
        if any(u < 2 for u in self.sizes):
            raise ValueError("every domain size must be at least 2")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> "Schema":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def d(self) -> int:
        return len(self.sizes)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subschema(self, indices: Sequence[int]) -> "Schema":
        return Schema(tuple(self.names[i] for i in indices), tuple(self.sizes[i] for i in indices))

    def domain(self, marginal: "Marginal") -> tuple[int, ...]:
        return tuple(self.sizes[i] for i in marginal)

    def cells(self, marginal: "Marginal") -> int:
        return int(np.prod(self.domain(marginal), dtype=np.int64))

    def fingerprint(self) -> int:
        """Stable 64-bit digest of names and sizes, used in wire headers."""
        text = "|".join(f"{n}:{u}" for n, u in zip(self.names, self.sizes))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


class Marginal(tuple):
    """Canonical (sorted, duplicate-free) tuple of attribute indices."""

    def __new__(cls, indices: Iterable[int] = ()):
        idx = [int(i) for i in indices]
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate attribute in marginal {idx}")
        if any(i < 0 for i in idx):
            raise DomainError(f"negative attribute index in {idx}")
        return super().__new__(cls, sorted(idx))

    def check(self, schema: Schema) -> "Marginal":
        if any(i >= schema.d for i in self):
            raise DomainError(f"marginal {tuple(self)} exceeds schema of {schema.d} attributes")
        return self

    def __repr__(self):
        return f"Marginal{tuple(self)}"


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: Schema
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.size == 0:
            rows = rows.reshape(0, self.schema.d)
        if rows.ndim != 2 or rows.shape[1] != self.schema.d:
            raise ShapeError(f"expected n x {self.schema.d} rows, got shape {rows.shape}")
        sizes = np.asarray(self.schema.sizes)
        bad = (rows < 0) | (rows >= sizes)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DomainError(
                f"row {r}, attribute {self.schema.names[c]!r}: value {rows[r, c]} "
                f"outside [0, {sizes[c]})"
            )
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def project(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        return Dataset(self.schema.subschema(indices), self.rows[:, indices])

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.schema == other.schema
            and np.array_equal(self.rows, other.rows)
        )

    __hash__ = None


def concat_columns(parts: Sequence[Dataset]) -> Dataset:
    names, sizes = [], []
    for p in parts:
        names.extend(p.schema.names)
        sizes.extend(p.schema.sizes)
    return Dataset(Schema(tuple(names), tuple(sizes)), np.hstack([p.rows for p in parts]))


def cell_index(values: Sequence[int], marginal: Marginal, schema: Schema) -> int:
    dom = schema.domain(marginal)
    if len(values) != len(dom):
        raise ShapeError(f"tuple of length {len(values)} for a {len(dom)}-way marginal")
    idx = 0
    for v, u in zip(values, dom):
        if not 0 <= v < u:
            raise DomainError(f"value {v} outside [0, {u})")
        idx = idx * u + int(v)
    return idx


def cell_tuple(index: int, marginal: Marginal, schema: Schema) -> tuple[int, ...]:
    dom = schema.domain(marginal)
    total = int(np.prod(dom, dtype=np.int64))
    if not 0 <= index < total:
        raise DomainError(f"cell {index} outside [0, {total})")
    return tuple(int(v) for v in np.unravel_index(index, dom))


def flat_cells(rows: np.ndarray, domain: Sequence[int]) -> np.ndarray:
    """Row-major cell index for each row of an (n, k) value matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(domain) == 0:
        return np.zeros(rows.shape[0], dtype=np.int64)
    return np.ravel_multi_index(tuple(rows.T), tuple(domain))


@dataclass(frozen=True, eq=False)
class ContingencyHistogram:
    marginal: Marginal
    domain: tuple[int, ...]
    cells: np.ndarray = field(repr=False)
    kind: str = "counts"

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float).ravel()
        object.__setattr__(self, "marginal", Marginal(self.marginal))
        object.__setattr__(self, "domain", tuple(int(u) for u in self.domain))
        if len(self.domain) != len(self.marginal):
            raise ShapeError("domain and marginal arity differ")
        if cells.size != int(np.prod(self.domain, dtype=np.int64)):
            raise ShapeError(f"{cells.size} cells for domain {self.domain}")
        if self.kind not in ("counts", "distribution"):
            raise ValueError(f"unknown histogram kind {self.kind!r}")
        if self.kind == "distribution":
            if (cells < -1e-12).any() or abs(cells.sum() - 1.0) > 1e-9:
                raise ValueError("distribution must be non-negative and sum to 1")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def total(self) -> float:
        return float(self.cells.sum())

    def table(self) -> np.ndarray:
        return self.cells.reshape(self.domain)

    def normalized(self) -> "ContingencyHistogram":
        total = self.cells.sum()
        if (self.cells < 0).any() or total <= 0:
            raise DegenerateInputError("histogram is not normalizable")
        return ContingencyHistogram(self.marginal, self.domain, self.cells / total, "distribution")

    def scaled(self, total: float) -> "ContingencyHistogram":
        return ContingencyHistogram(
            self.marginal, self.domain, self.normalized().cells * total, "counts"
        )

    def project(self, sub: Iterable[int]) -> "ContingencyHistogram":
        """Sum out every attribute not in ``sub``."""
        sub = Marginal(sub)
        missing = set(sub) - set(self.marginal)
        if missing:
            raise ShapeError(f"attributes {sorted(missing)} not in {tuple(self.marginal)}")
        axes = tuple(i for i, a in enumerate(self.marginal) if a not in sub)
        table = self.table().sum(axis=axes) if axes else self.table()
        dom = tuple(u for a, u in zip(self.marginal, self.domain) if a in sub)
        kind = self.kind if self.kind == "counts" else "distribution"
        return ContingencyHistogram(sub, dom, np.ravel(table), kind)


def compute_histogram(data: Dataset, marginal: Iterable[int]) -> ContingencyHistogram:
    marginal = Marginal(marginal).check(data.schema)
    dom = data.schema.domain(marginal)
    size = int(np.prod(dom, dtype=np.int64))
    idx = flat_cells(data.rows[:, list(marginal)], dom)
    counts = np.bincount(idx, minlength=size).astype(float)
    return ContingencyHistogram(marginal, dom, counts, "counts")


def tvd(a: ContingencyHistogram, b: ContingencyHistogram) -> float:
    if a.marginal != b.marginal or a.domain != b.domain:
        raise ShapeError(f"cannot compare {tuple(a.marginal)} with {tuple(b.marginal)}")
    p, q = a.normalized().cells, b.normalized().cells
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))
