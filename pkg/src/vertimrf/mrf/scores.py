"""Pairwise correlation scores and marginal usefulness checks."""

from __future__ import annotations

import numpy as np

from ..core import ContingencyHistogram, DegenerateInputError, Schema

R_SCORE_SENSITIVITY = 2.0
"""L1 sensitivity of the exact R-score under adding or removing one record."""


def r_score(pair_hist: ContingencyHistogram, n: float, sigma_r: float = 0.0,
            rng: np.random.Generator | None = None) -> float:
    """(n/2) * || Pr[A,B] - Pr[A] Pr[B] ||_1, plus optional Gaussian noise."""
    if len(pair_hist.marginal) != 2:
        raise ValueError("R-score needs a two-way histogram")
    cells = np.clip(pair_hist.cells, 0, None)
    total = cells.sum()
    if total <= 0:
        raise DegenerateInputError("R-score of a histogram with no mass")
    joint = (cells / total).reshape(pair_hist.domain)
    prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    score = 0.5 * n * float(np.abs(joint - prod).sum())
    if sigma_r > 0:
        if rng is None:
            raise ValueError("noisy R-score needs an rng")
        score += float(rng.normal(0.0, sigma_r))
    return score


def theta_useful(cells: int, n_hat: float, theta: float, g: float) -> bool:
    """Average count per cell is at least theta * g."""
    return n_hat / cells >= theta * g


def expected_abs_gaussian(sigma: float) -> float:
    return sigma * float(np.sqrt(2.0 / np.pi))


def marginal_cells(schema: Schema, marginal) -> int:
    return schema.cells(marginal)
