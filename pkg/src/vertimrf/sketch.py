"""Differentially private Flajolet-Martin sketches.

A party encodes, for each attribute value, the set of record ids holding it
as one DP FM sketch per hash key.  The server merges sketches by ``max`` and
recovers contingency histograms by inclusion-exclusion over complements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ContingencyHistogram, Dataset, Marginal
from .keys import KeyRing
from .privacy import (
    RULE_FM_RDP,
    PrivacyBudget,
    SpendLedger,
    max_geometric,
    per_repeat_epsilon,
)

_CHUNK = 256


def phantom_count(eps_prime: float) -> int:
    if eps_prime > 50:
        return 1
    return int(math.ceil(1.0 / math.expm1(eps_prime)))


def alpha_floor(gamma: float, eps_prime: float) -> int:
    return int(math.ceil(math.log(1.0 / -math.expm1(-eps_prime)) / math.log1p(gamma)))


def estimator_bias(gamma: float) -> float:
    """Multiplicative correction for the harmonic mean of ``(1+gamma)^alpha``.

    For a set of size k, ``(1+gamma)^-alpha`` has mean close to
    ``ln(1+gamma) / (gamma k)``; multiplying the harmonic mean by
    ``gamma / ln(1+gamma)`` removes the rounding bias of the integer maximum.
    """
    return gamma / math.log1p(gamma)


@dataclass(frozen=True)
class SketchParams:
    gamma: float
    t: int
    eps_prime: float
    key_ids: tuple[int, ...]
    k_p: int = field(init=False)
    alpha_min: int = field(init=False)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.t < 1 or not self.eps_prime > 0:
            raise ValueError("t and eps_prime must be positive")
        keys = tuple(int(k) for k in self.key_ids)
        if len(keys) != self.t or len(set(keys)) != self.t:
            raise ValueError("need t distinct key ids")
        object.__setattr__(self, "key_ids", keys)
        object.__setattr__(self, "k_p", phantom_count(self.eps_prime))
        object.__setattr__(self, "alpha_min", alpha_floor(self.gamma, self.eps_prime))


@dataclass(frozen=True, eq=False)
class SketchSet:
    """Per attribute a ``(u_j, t)`` matrix of sketch values, keyed by global index."""

    params: SketchParams
    sketches: Mapping[int, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for j, a in self.sketches.items():
            a = np.asarray(a, dtype=np.uint32)
            if a.ndim != 2 or a.shape[1] != self.params.t:
                raise ValueError(f"attribute {j}: expected (u, {self.params.t}) sketches, got {a.shape}")
            if (a < self.params.alpha_min).any():
                raise ValueError(f"attribute {j}: sketch below alpha_min")
            a.setflags(write=False)
            frozen[int(j)] = a
        object.__setattr__(self, "sketches", dict(sorted(frozen.items())))

    @property
    def attributes(self) -> tuple[int, ...]:
        return tuple(self.sketches)

    def domain(self, j: int) -> int:
        return self.sketches[j].shape[0]

    def __len__(self):
        return sum(a.size for a in self.sketches.values())

    def __getitem__(self, key: tuple[int, int, int]) -> int:
        j, v, h = key
        return int(self.sketches[j][v, h])

    def __eq__(self, other):
        return (
            isinstance(other, SketchSet)
            and self.params == other.params
            and self.sketches.keys() == other.sketches.keys()
            and all(np.array_equal(self.sketches[j], other.sketches[j]) for j in self.sketches)
        )

    __hash__ = None


class IncompatibleSketches(ValueError):
    pass


def merge_sketch_sets(sets: Iterable[SketchSet]) -> SketchSet:
    """Gather per-party sketch sets into one; all must share keys and parameters."""
    sets = list(sets)
    if not sets:
        raise ValueError("nothing to merge")
    params = sets[0].params
    merged: dict[int, np.ndarray] = {}
    for s in sets:
        if s.params != params:
            raise IncompatibleSketches("sketch sets disagree on gamma, t, eps' or key ids")
        for j, a in s.sketches.items():
            merged[j] = np.maximum(merged[j], a) if j in merged else a
    return SketchSet(params, merged)


def hash_geometric(element_ids, key_ids, gamma: float, ring: KeyRing) -> np.ndarray:
    """Geometric(gamma/(1+gamma)) value per (element, key), deterministic in both.

    Scalar inputs give a scalar; otherwise shape ``(len(ids), len(keys))``.
    """
    scalar = np.ndim(element_ids) == 0 and np.ndim(key_ids) == 0
    u = ring.hash_uniform(np.atleast_1d(element_ids), np.atleast_1d(key_ids))
    g = np.floor(-np.log(u) / math.log1p(gamma)).astype(np.int64)
    return int(g[0, 0]) if scalar else g


def dpfm(ids: Iterable[int], params: SketchParams, key_id: int, ring: KeyRing,
         rng: np.random.Generator) -> int:
    ids = np.unique(np.fromiter(ids, dtype=np.int64))
    alpha_x = int(hash_geometric(ids, [key_id], params.gamma, ring).max()) if ids.size else 0
    alpha_p = int(max_geometric(params.gamma, params.k_p, rng))
    return max(alpha_x, alpha_p, params.alpha_min)


def merge_max(alphas: Sequence[int]) -> int:
    if len(alphas) == 0:
        raise ValueError("cannot merge an empty list of sketches")
    return max(alphas)


def harmonic_mean(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("harmonic mean of an empty list")
    if (x <= 0).any():
        raise ValueError("harmonic mean needs strictly positive values")
    return float(x.size / np.sum(1.0 / x))


def membership(data: Dataset, column: int) -> list[np.ndarray]:
    """Record-id sets per value of one local column; ids are row positions."""
    col = data.rows[:, column]
    return [np.flatnonzero(col == v) for v in range(data.schema.sizes[column])]


def loc_enc_sketch(data: Dataset, attributes: Sequence[int], budget: PrivacyBudget,
                   gamma: float, t: int, ring: KeyRing, rng: np.random.Generator, *,
                   d_global: int, key_ids: Sequence[int] | None = None,
                   ledger: SpendLedger | None = None, party: str = "") -> SketchSet:
    """Encode every local column as ``u_j x t`` DP FM sketches.

    ``attributes`` gives the global index of each local column.  The
    per-sketch epsilon is derived from the whole federation's attribute count
    so the t * d sketches across all parties compose to ``budget``.
    """
    if not budget.epsilon > 0:
        raise ValueError("sketch encoding needs a positive budget")
    if len(attributes) != data.schema.d:
        raise ValueError("one global index per local column required")
    key_ids = tuple(ring.key_ids[:t] if key_ids is None else key_ids)
    eps_prime = per_repeat_epsilon(budget.epsilon, budget.delta, t, d_global)
    params = SketchParams(gamma, t, eps_prime, key_ids)

    n = data.n
    sizes = data.schema.sizes
    orders = [np.argsort(data.rows[:, c], kind="stable") for c in range(data.schema.d)]
    counts = [np.bincount(data.rows[:, c], minlength=sizes[c]) for c in range(data.schema.d)]
    out = [np.zeros((sizes[c], t), dtype=np.int64) for c in range(data.schema.d)]
    streams = rng.spawn(data.schema.d)

    if n:
        ids = np.arange(n)
        for h0 in range(0, t, _CHUNK):
            keys = key_ids[h0:h0 + _CHUNK]
            g = hash_geometric(ids, keys, gamma, ring)
            for c in range(data.schema.d):
                nz = np.flatnonzero(counts[c])
                starts = np.concatenate(([0], np.cumsum(counts[c])[:-1]))[nz]
                block = np.maximum.reduceat(g[orders[c]], starts, axis=0)
                out[c][nz, h0:h0 + len(keys)] = block

    sketches = {}
    for c, stream in enumerate(streams):
        phantoms = max_geometric(gamma, params.k_p, stream, size=(sizes[c], t))
        a = np.maximum(np.maximum(out[c], phantoms), params.alpha_min)
        sketches[int(attributes[c])] = a.astype(np.uint32)

    if ledger is not None:
        ledger.record(f"loc_enc{':' + party if party else ''}", eps_prime, budget.delta,
                      rule=RULE_FM_RDP, count=t * data.schema.d, group="loc_enc")
    return SketchSet(params, sketches)


def estimate_cardinality(alphas: np.ndarray, gamma: float, phantoms: float = 0.0) -> np.ndarray:
    """Cardinality from t sketch maxima along the last axis, minus phantom elements."""
    a = np.asarray(alphas, dtype=float)
    # harmonic mean of (1+gamma)^a, written in log space for large a
    log_base = math.log1p(gamma)
    amin = a.min(axis=-1, keepdims=True)
    s = np.exp(-(a - amin) * log_base).mean(axis=-1)
    hm = np.exp(amin[..., 0] * log_base) / s
    return hm * estimator_bias(gamma) - phantoms


def car_est_sketch(marginal: Iterable[int], sketch_set: SketchSet, n_hat: float,
                   gamma: float | None = None, eps_prime: float | None = None) -> ContingencyHistogram:
    """Estimate the contingency histogram of ``marginal`` from merged sketches."""
    marginal = Marginal(marginal)
    params = sketch_set.params
    gamma = params.gamma if gamma is None else gamma
    k_p = params.k_p if eps_prime is None else phantom_count(eps_prime)
    missing = [a for a in marginal if a not in sketch_set.sketches]
    if missing:
        raise KeyError(f"attributes {missing} have no sketches")
    dom = tuple(sketch_set.domain(a) for a in marginal)
    t = params.t

    union = None
    for axis, a in enumerate(marginal):
        comp = _complement_max(sketch_set.sketches[a].astype(np.int64))
        shape = [1] * len(marginal) + [t]
        shape[axis] = dom[axis]
        comp = comp.reshape(shape)
        union = comp if union is None else np.maximum(union, comp)
    phantoms = sum(u - 1 for u in dom) * k_p
    est = estimate_cardinality(union, gamma, phantoms)
    cells = np.maximum(n_hat - est, 0.0)
    return ContingencyHistogram(marginal, dom, cells.ravel(), "counts")


def _complement_max(a: np.ndarray) -> np.ndarray:
    """Row v holds max over all other rows, per column."""
    u = a.shape[0]
    if u == 1:
        return np.zeros_like(a)
    top = np.argmax(a, axis=0)
    first = a[top, np.arange(a.shape[1])]
    masked = a.copy()
    masked[top, np.arange(a.shape[1])] = np.iinfo(np.int64).min
    second = masked.max(axis=0)
    rows = np.arange(u)[:, None]
    return np.where(rows == top[None, :], second[None, :], first[None, :])
