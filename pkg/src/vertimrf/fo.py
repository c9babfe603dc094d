"""Generalized randomized response encoding and unbiased marginal estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import ContingencyHistogram, Dataset, DomainError, Marginal, flat_cells
from .privacy import RULE_GRR_MIN, PrivacyBudget, SpendLedger, grr_epsilon_for_budget


def keep_probability(u: int, eps_prime: float) -> tuple[float, float]:
    """(p, q): probability of reporting the true value and each specific other value."""
    if math.isinf(eps_prime):
        return 1.0, 0.0
    e = math.exp(eps_prime)
    return e / (e + u - 1), 1.0 / (e + u - 1)


def grr_matrix(u: int, eps_prime: float) -> np.ndarray:
    """Row-stochastic u x u transition matrix, rows indexed by the true value."""
    p, q = keep_probability(u, eps_prime)
    return np.full((u, u), q) + np.eye(u) * (p - q)


def _perturb_with(values: np.ndarray, u: int, eps_prime: float, draws: np.ndarray) -> np.ndarray:
    # one uniform per report: below p keeps the value, the rest of [p, 1) picks another
    p, _ = keep_probability(u, eps_prime)
    keep = draws < p
    other = np.floor((draws - p) / (1.0 - p) * (u - 1)).astype(np.int64) if p < 1 else np.zeros_like(values)
    other = np.clip(other, 0, u - 2)
    other = other + (other >= values)
    return np.where(keep, values, other)


def grr_perturb(value, u: int, eps_prime: float, rng: np.random.Generator):
    values = np.asarray(value, dtype=np.int64)
    if ((values < 0) | (values >= u)).any():
        raise DomainError(f"value outside [0, {u})")
    if not eps_prime > 0:
        raise ValueError("eps_prime must be positive")
    out = _perturb_with(values, u, eps_prime, rng.random(values.shape))
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class FOEncodedData:
    attributes: tuple[int, ...]
    sizes: tuple[int, ...]
    rows: np.ndarray = field(repr=False)
    eps_prime: float

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, len(self.attributes))
        if ((rows < 0) | (rows >= np.asarray(self.sizes))).any():
            raise DomainError("perturbed value outside its domain")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "attributes", tuple(int(a) for a in self.attributes))
        object.__setattr__(self, "sizes", tuple(int(u) for u in self.sizes))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def column(self, attribute: int) -> np.ndarray:
        return self.rows[:, self.attributes.index(attribute)]

    def __eq__(self, other):
        return (
            isinstance(other, FOEncodedData)
            and self.attributes == other.attributes
            and self.sizes == other.sizes
            and self.eps_prime == other.eps_prime
            and np.array_equal(self.rows, other.rows)
        )

    __hash__ = None


def loc_enc_fo(data: Dataset, attributes: Sequence[int], budget: PrivacyBudget,
               rng: np.random.Generator, *, d_global: int, eps_prime: float | None = None,
               ledger: SpendLedger | None = None, party: str = "") -> FOEncodedData:
    """Perturb every cell of the local table with GRR.

    Unless given, the per-attribute epsilon is the largest one whose
    whole-record guarantee over ``d_global`` attributes fits in ``budget``.
    """
    if not budget.epsilon > 0:
        raise ValueError("frequency-oracle encoding needs a positive budget")
    if eps_prime is None:
        eps_prime = grr_epsilon_for_budget(budget.epsilon, budget.delta, d_global)
    draws = rng.random(data.rows.shape)
    cols = [
        _perturb_with(data.rows[:, c], data.schema.sizes[c], eps_prime, draws[:, c])
        for c in range(data.schema.d)
    ]
    rows = np.stack(cols, axis=1) if cols else data.rows.copy()
    if ledger is not None and not math.isinf(eps_prime):
        ledger.record(f"loc_enc{':' + party if party else ''}", eps_prime, budget.delta,
                      rule=RULE_GRR_MIN, count=data.schema.d, group="loc_enc")
    return FOEncodedData(tuple(attributes), data.schema.sizes, rows, eps_prime)


def concat_encoded(parts: Iterable[FOEncodedData]) -> FOEncodedData:
    parts = list(parts)
    eps = {p.eps_prime for p in parts}
    if len(eps) != 1:
        raise ValueError("parties encoded with different eps'")
    if len({p.n for p in parts}) != 1:
        raise ValueError("parties report different row counts")
    attrs = sum((p.attributes for p in parts), ())
    sizes = sum((p.sizes for p in parts), ())
    return FOEncodedData(attrs, sizes, np.hstack([p.rows for p in parts]), eps.pop())


def car_est_fo(marginal: Iterable[int], encoded: FOEncodedData) -> ContingencyHistogram:
    """Unbiased histogram estimate: raw perturbed counts pushed through P^-1.

    P factorizes as a Kronecker product of per-attribute GRR matrices, each
    with closed-form inverse ``(x - q * sum(x)) / (p - q)`` along its axis.
    """
    marginal = Marginal(marginal)
    missing = [a for a in marginal if a not in encoded.attributes]
    if missing:
        raise KeyError(f"attributes {missing} were not encoded")
    cols = [encoded.attributes.index(a) for a in marginal]
    dom = tuple(encoded.sizes[c] for c in cols)
    size = int(np.prod(dom))
    raw = np.bincount(flat_cells(encoded.rows[:, cols], dom), minlength=size).astype(float)
    table = raw.reshape(dom)
    for axis, u in enumerate(dom):
        p, q = keep_probability(u, encoded.eps_prime)
        if p - q <= 0:
            raise ZeroDivisionError("GRR matrix is singular at eps' = 0")
        table = (table - q * table.sum(axis=axis, keepdims=True)) / (p - q)
    return ContingencyHistogram(marginal, dom, table.ravel(), "counts")
