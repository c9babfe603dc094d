"""Noise mechanisms, budget plans and the spend ledger.

Every random draw in the package goes through a ``numpy.random.Generator``
passed in by the caller; nothing here touches global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

RULE_SEQUENTIAL = "sequential"
RULE_ZCDP = "gaussian-zcdp"
RULE_FM_RDP = "fm-rdp"
RULE_GRR_MIN = "grr-min"


class CompositionError(ValueError):
    """The RDP composition bound does not apply to these parameters."""


class BudgetExceeded(RuntimeError):
    """A spend would push the ledger past its configured budget."""


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


@dataclass(frozen=True)
class StageBudgets:
    """Absolute (epsilon, delta) per pipeline stage, summed over all parties."""

    loc_mrf: PrivacyBudget | None
    loc_enc: PrivacyBudget
    noisy_count: PrivacyBudget
    binning: PrivacyBudget | None
    m: int

    def loc_mrf_per_party(self) -> PrivacyBudget | None:
        if self.loc_mrf is None:
            return None
        return PrivacyBudget(self.loc_mrf.epsilon / self.m, self.loc_mrf.delta / self.m)


@dataclass(frozen=True)
class BudgetPlan:
    """Fractions of the total budget per stage.

    ``noisy_count`` is a sub-share of ``loc_enc``.  When no attribute is
    binned, the binning share is handed to the other two stages in proportion
    to their fractions so the whole budget is still spent.
    """

    loc_mrf: float = 0.4
    loc_enc: float = 0.4
    binning: float = 0.2
    noisy_count: float = 0.1
    name: str = "default"

    def __post_init__(self):
        fr = (self.loc_mrf, self.loc_enc, self.binning)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"stage fractions must be >= 0 and sum to 1, got {fr}")
        if not 0 <= self.noisy_count <= 1:
            raise ValueError("noisy_count sub-share must lie in [0, 1]")
        if self.loc_enc <= 0:
            raise ValueError("loc_enc share must be positive")

    @classmethod
    def default(cls) -> "BudgetPlan":
        return cls()

    @classmethod
    def half_split(cls) -> "BudgetPlan":
        """epsilon/2 over all local MRFs (epsilon/2m each), epsilon/2 for encoding."""
        return cls(loc_mrf=0.5, loc_enc=0.5, binning=0.0, noisy_count=0.1, name="half-split")

    @classmethod
    def named(cls, name: str) -> "BudgetPlan":
        plans = {"default": cls.default, "half-split": cls.half_split}
        if name not in plans:
            raise ValueError(f"unknown budget plan {name!r}; choose from {sorted(plans)}")
        return plans[name]()

    def allocate(self, total: PrivacyBudget, m: int, binning_active: bool = True,
                 enc_uses_delta: bool = True) -> StageBudgets:
        mrf, enc, binf = self.loc_mrf, self.loc_enc, self.binning
        if not binning_active and binf > 0:
            mrf, enc = mrf + binf * mrf / (mrf + enc), enc + binf * enc / (mrf + enc)
            binf = 0.0
        eps, delta = total.epsilon, total.delta
        # delta goes to the two stages whose composition needs it
        if mrf == 0:
            d_mrf = 0.0
        elif enc_uses_delta:
            d_mrf = delta * mrf / (mrf + enc)
        else:
            d_mrf = delta
        d_enc = delta - d_mrf
        enc_eps = eps * enc
        return StageBudgets(
            loc_mrf=PrivacyBudget(eps * mrf, d_mrf) if mrf > 0 else None,
            loc_enc=PrivacyBudget(enc_eps * (1 - self.noisy_count), d_enc),
            noisy_count=PrivacyBudget(enc_eps * self.noisy_count, 0.0),
            binning=PrivacyBudget(eps * binf, 0.0) if binf > 0 else None,
            m=m,
        )


@dataclass(frozen=True)
class LedgerEntry:
    stage: str
    epsilon: float
    delta: float
    rule: str
    count: int = 1
    group: str = ""


@dataclass
class SpendLedger:
    """Append-only record of privacy spends.

    Entries with rule ``fm-rdp`` or ``grr-min`` are per-mechanism spends that
    compose jointly within their ``group``; all other entries already carry a
    composed (epsilon, delta) and add sequentially.
    """

    budget: PrivacyBudget | None = None
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, stage: str, epsilon: float, delta: float = 0.0, rule: str = RULE_SEQUENTIAL,
               count: int = 1, group: str = "") -> LedgerEntry:
        entry = LedgerEntry(stage, float(epsilon), float(delta), rule, int(count), group or stage)
        trial = self.entries + [entry]
        if self.budget is not None:
            eps, delta_total = _total(trial)
            if eps > self.budget.epsilon * (1 + 1e-9) or delta_total > self.budget.delta * (1 + 1e-9) + 1e-15:
                raise BudgetExceeded(
                    f"spend {stage!r} brings total to ({eps:.6g}, {delta_total:.3g}) "
                    f"over budget ({self.budget.epsilon:.6g}, {self.budget.delta:.3g})"
                )
        self.entries.append(entry)
        return entry

    def total(self) -> tuple[float, float]:
        return _total(self.entries)

    def within_budget(self) -> bool:
        if self.budget is None:
            return True
        eps, delta = self.total()
        return eps <= self.budget.epsilon * (1 + 1e-9) and delta <= self.budget.delta * (1 + 1e-9) + 1e-15

    def to_json(self) -> list[dict]:
        return [asdict(e) for e in self.entries]

    def extend(self, other: "SpendLedger") -> None:
        for e in other.entries:
            self.record(e.stage, e.epsilon, e.delta, e.rule, e.count, e.group)


def _total(entries: list[LedgerEntry]) -> tuple[float, float]:
    eps = delta = 0.0
    groups: dict[tuple[str, str], list[LedgerEntry]] = {}
    for e in entries:
        if e.rule in (RULE_FM_RDP, RULE_GRR_MIN):
            groups.setdefault((e.rule, e.group), []).append(e)
        else:
            eps += e.epsilon
            delta += e.delta
    for (rule, group), items in groups.items():
        each = {round(i.epsilon, 15) for i in items}
        deltas = {i.delta for i in items}
        if len(each) != 1 or len(deltas) != 1:
            raise ValueError(f"group {group!r} mixes per-mechanism epsilons or deltas")
        count = sum(i.count for i in items)
        e0, d0 = items[0].epsilon, items[0].delta
        if rule == RULE_FM_RDP:
            eps += fm_composed_epsilon(e0, count, d0)
            delta += d0
        else:
            g_eps, g_delta = grr_composed(e0, count, d0)
            eps += g_eps
            delta += g_delta
    return eps, delta


# -- mechanisms --------------------------------------------------------------

def laplace(scale: float, rng: np.random.Generator, size=None):
    if not scale > 0:
        raise ValueError(f"Laplace scale must be positive, got {scale}")
    return rng.laplace(0.0, scale, size)


def gaussian(sigma: float, rng: np.random.Generator, size=None):
    if not sigma > 0:
        raise ValueError(f"Gaussian sigma must be positive, got {sigma}")
    return rng.normal(0.0, sigma, size)


def sanitize_count(n: int, eps: float, rng: np.random.Generator,
                   ledger: SpendLedger | None = None, stage: str = "noisy_count") -> float:
    """``n`` plus Laplace(1/eps) noise; no clamping."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if math.isinf(eps):
        return float(n)
    if ledger is not None:
        ledger.record(stage, eps, 0.0)
    return float(n + laplace(1.0 / eps, rng))


def geometric(gamma: float, rng: np.random.Generator, size=None):
    """Geometric(gamma/(1+gamma)) on {0, 1, ...} by inverse CDF.

    ``P(Y >= y) = (1+gamma)^-y``.
    """
    u = 1.0 - rng.random(size)  # (0, 1]
    return np.floor(np.log(u) / -math.log1p(gamma)).astype(np.int64)


def max_geometric(gamma: float, k: int, rng: np.random.Generator, size=None):
    """Maximum of ``k`` i.i.d. Geometric(gamma/(1+gamma)) draws, sampled in one step.

    Uses ``P(max <= x) = (1 - (1+gamma)^-(x+1))^k``; returns 0 for ``k == 0``.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return np.zeros(size, dtype=np.int64) if size is not None else 0
    u = 1.0 - rng.random(size)  # (0, 1]
    tail = -np.expm1(np.log(u) / k)  # 1 - u^(1/k)
    with np.errstate(divide="ignore"):
        x = np.ceil(np.log(tail) / -math.log1p(gamma)) - 1
    return np.maximum(x, 0).astype(np.int64)


# -- composition -------------------------------------------------------------

def rdp_compose(count: int, eps_each: float, delta: float) -> float:
    """Composed epsilon of ``count`` eps_each-DP mechanisms via the RDP route."""
    if count < 1 or not eps_each > 0:
        raise ValueError("count and eps_each must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    log_inv = math.log(1.0 / delta)
    if log_inv < count * eps_each ** 2:
        raise CompositionError(
            f"log(1/delta)={log_inv:.4g} < count*eps^2={count * eps_each ** 2:.4g}; "
            "use sequential composition"
        )
    return 4.0 * eps_each * math.sqrt(2.0 * count * log_inv)


def per_repeat_epsilon(eps: float, delta: float, t: int, d: int) -> float:
    """Per-sketch epsilon so that t repeats over d attributes compose to eps."""
    if not (eps > 0 and t > 0 and d > 0):
        raise ValueError("eps, t and d must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return eps / (4.0 * math.sqrt(t * d * math.log(1.0 / delta)))


def fm_composed_epsilon(eps_prime: float, count: int, delta: float) -> float:
    """Guarantee of ``count`` = t*d same-key sketches at eps_prime each."""
    return 4.0 * eps_prime * math.sqrt(count * math.log(1.0 / delta))


def grr_composed(eps_prime: float, d: int, delta: float) -> tuple[float, float]:
    """Whole-record guarantee of GRR on d attributes at eps_prime each.

    Each replace-one GRR report is eps_prime/2-DP under add/remove
    neighbours; the tighter of sequential and RDP composition is returned
    together with the delta it needs (0 for the sequential branch).
    """
    seq = d * eps_prime / 2.0
    if not 0 < delta < 1:
        return seq, 0.0
    try:
        rdp = rdp_compose(d, eps_prime / 2.0, delta)
    except CompositionError:
        return seq, 0.0
    return (rdp, delta) if rdp < seq else (seq, 0.0)


def grr_epsilon_for_budget(eps: float, delta: float, d: int) -> float:
    """Largest per-attribute GRR epsilon whose composed guarantee is at most eps."""
    candidates = [2.0 * eps / d]
    if 0 < delta < 1:
        e_rdp = eps / (2.0 * math.sqrt(2.0 * d * math.log(1.0 / delta)))
        if math.log(1.0 / delta) >= d * (e_rdp / 2.0) ** 2:
            candidates.append(e_rdp)
    best = max(candidates)
    if grr_composed(best, d, delta)[0] > eps * (1 + 1e-12):
        best = min(candidates)
    return best


def zcdp_rho(eps: float, delta: float) -> float:
    """Largest rho such that rho-zCDP implies (eps, delta)-DP."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1) for the Gaussian mechanism")
    log_inv = math.log(1.0 / delta)
    return (math.sqrt(log_inv + eps) - math.sqrt(log_inv)) ** 2


def gaussian_sigma(rho: float, sensitivity: float = 1.0, count: int = 1) -> float:
    """Noise scale for ``count`` Gaussian releases of an L2-sensitivity query under rho-zCDP."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    return sensitivity * math.sqrt(count / (2.0 * rho))
