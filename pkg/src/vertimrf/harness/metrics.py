"""Marginal-fidelity metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from ..core import Dataset, Marginal, compute_histogram, tvd


@dataclass(frozen=True)
class TVDSummary:
    l: int
    mean: float
    std: float
    count: int

    def to_json(self) -> dict:
        return {"l": self.l, "mean": self.mean, "std": self.std, "count": self.count}


def _sample_marginals(d: int, l: int, samples: int, rng: np.random.Generator) -> list[Marginal]:
    total = math.comb(d, l)
    if samples >= total:
        return [Marginal(c) for c in combinations(range(d), l)]
    seen: set[Marginal] = set()
    while len(seen) < samples:
        seen.add(Marginal(rng.choice(d, size=l, replace=False)))
    return sorted(seen)


def eval_lway_tvd(real: Dataset, synth: Dataset, l: int, samples: int = 300,
                  rng: np.random.Generator | None = None) -> TVDSummary:
    """Mean and std of TVD over up to ``samples`` distinct random l-way marginals."""
    if real.schema != synth.schema:
        raise ValueError("real and synthetic data have different schemas")
    if not 1 <= l <= real.schema.d:
        raise ValueError(f"l={l} outside [1, {real.schema.d}]")
    rng = rng if rng is not None else np.random.default_rng(0)
    marginals = _sample_marginals(real.schema.d, l, samples, rng)
    vals = np.array([tvd(compute_histogram(real, m), compute_histogram(synth, m)) for m in marginals])
    return TVDSummary(l, float(vals.mean()), float(vals.std()), len(vals))
