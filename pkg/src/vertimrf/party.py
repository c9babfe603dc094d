"""Per-party pipeline: local private MRF, binning, encoding and the outgoing message."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .core import ContingencyHistogram, Dataset, Marginal, Schema, compute_histogram
from .fo import FOEncodedData
from .keys import KeyRing
from .mrf import (
    R_SCORE_SENSITIVITY,
    AttributeGraph,
    MRFModel,
    expected_abs_gaussian,
    fit_theta,
    max_clique_domain,
    r_score,
    theta_useful,
    triangulate,
)
from .privacy import (
    RULE_SEQUENTIAL,
    RULE_ZCDP,
    BudgetExceeded,
    PrivacyBudget,
    SpendLedger,
    gaussian_sigma,
    zcdp_rho,
)
from .sketch import SketchSet

log = logging.getLogger(__name__)

# mechanism tags allowed on message payloads
MECHANISMS = frozenset({
    "public-schema",  # attribute names, domain sizes, global indices
    "gaussian-zcdp",  # local MRF graph, marginal set and parameters
    "dpfm",  # sketch encoding
    "grr",  # frequency-oracle encoding
    "laplace",  # value distributions and the noisy record count
})


def local_clique_bound(tau: float, m: int, schema: Schema) -> int:
    """Largest local clique domain: tau / (m * mean_domain^2)."""
    if m < 1:
        raise ValueError("m must be positive")
    ubar = sum(schema.sizes) / schema.d
    if ubar < 2:
        raise ValueError("mean domain size below 2")
    return int(tau // (m * ubar ** 2))


@dataclass(frozen=True)
class LocMRFConfig:
    theta: float = 4.0
    rounds: int = 3
    graph_share: float = 0.1
    refine_share: float = 0.3
    max_way: int = 3
    refine_batch: int = 4
    fit_iterations: int = 500
    edge_floor: float = 0.005


@dataclass(frozen=True, eq=False)
class LocalMRF:
    model: MRFModel
    graph: AttributeGraph
    marginals: tuple[Marginal, ...]
    scores: Mapping[tuple[int, int], float] = field(default_factory=dict)


def loc_mrf(data: Dataset, tau_prime: float, budget: PrivacyBudget, rng: np.random.Generator,
            config: LocMRFConfig = LocMRFConfig(), *, ledger: SpendLedger | None = None,
            party: str = "") -> LocalMRF:
    """Private MRF over one party's columns, in local attribute indices.

    Noisy pairwise R-scores build the graph under the clique bound; the most
    correlated useful marginal per attribute is measured with Gaussian noise
    and fitted; a few refinement rounds add candidates the model misses.  The
    whole stage is accounted as one rho-zCDP spend converted to ``budget``.
    """
    schema, d, n = data.schema, data.schema.d, data.n
    exact = math.isinf(budget.epsilon)
    if not exact:
        rho = zcdp_rho(budget.epsilon, budget.delta)
        if not rho > 0 or not math.isfinite(rho):
            raise ValueError(f"budget {budget} too small to calibrate Gaussian noise")
    else:
        rho = math.inf
    pairs = list(combinations(range(d), 2))
    rho_graph = rho * config.graph_share if pairs else 0.0
    rho_refine = rho * config.refine_share if config.rounds > 0 and d > 1 else 0.0
    rho_init = rho - rho_graph - rho_refine

    def sigma(r, count, sens=1.0):
        return 0.0 if exact else gaussian_sigma(r, sens, count)

    # graph from noisy R-scores
    sigma_r = sigma(rho_graph, len(pairs), R_SCORE_SENSITIVITY) if pairs else 0.0
    scores = {}
    for a, b in pairs:
        hist = compute_histogram(data, (a, b))
        scores[(a, b)] = r_score(hist, n, 0.0) + (rng.normal(0.0, sigma_r) if sigma_r > 0 else 0.0)
    threshold = 2.0 * sigma_r + config.edge_floor * max(n, 1)
    graph = AttributeGraph.empty(range(d))
    for (a, b), s in sorted(scores.items(), key=lambda kv: -kv[1]):
        if s < threshold:
            break
        trial = triangulate(graph.with_edges([(a, b)]))
        if max_clique_domain(trial, schema) <= tau_prime:
            graph = trial
    graph = triangulate(graph)

    # candidate marginals that tolerate the measurement noise
    sigma_m = sigma(rho_init, d)
    g = expected_abs_gaussian(sigma_m)
    candidates = set()
    for clique in graph.cliques:
        for k in range(2, min(config.max_way, len(clique)) + 1):
            for sub in combinations(clique, k):
                if theta_useful(schema.cells(sub), n, config.theta, g):
                    candidates.add(Marginal(sub))

    def strength(m):
        return sum(scores[p] for p in combinations(m, 2))

    chosen: list[Marginal] = []
    for a in range(d):
        own = [m for m in candidates if a in m and strength(m) >= threshold]
        best = max(own, key=lambda m: (strength(m), -len(m), tuple(m)), default=Marginal((a,)))
        if best not in chosen:
            chosen.append(best)
    # attributes already covered by another choice do not need their own singleton
    chosen = [m for m in chosen if len(m) > 1 or not any(m[0] in o for o in chosen if len(o) > 1)]

    pool = sorted(candidates - set(chosen))
    if not pool:
        rho_init, rho_refine = rho_init + rho_refine, 0.0
    sigma_m = sigma(rho_init, len(chosen))
    targets = {}
    for m in chosen:
        targets[m] = _measure(data, m, sigma_m, rng)
    totals = [t.sum() for t in targets.values()]
    n_loc = max(float(np.mean(totals)), 1.0)

    model = MRFModel.create(schema, chosen, graph=graph, total=n_loc)
    model = fit_theta(model, _clamped(targets), config.fit_iterations).model

    if rho_refine > 0 and pool:
        per_round = rho_refine / config.rounds
        for _ in range(config.rounds):
            pool = [m for m in pool if m not in model.marginals]
            if not pool:
                break
            k = min(config.refine_batch, len(pool))
            batch = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
            sigma_b = sigma(per_round, k)
            added = []
            for m in batch:
                y = _measure(data, m, sigma_b, rng)
                err = np.abs(model.infer(m).ravel() * n_loc - y).sum()
                noise = y.size * expected_abs_gaussian(sigma_b)
                if err > 2.0 * noise:
                    targets[m] = y
                    added.append(m)
            if added:
                model = model.extend(added)
                model = fit_theta(model, _clamped(targets), config.fit_iterations).model

    if ledger is not None:
        ledger.record(f"loc_mrf{':' + party if party else ''}", budget.epsilon, budget.delta, rule=RULE_ZCDP)
    return LocalMRF(model, graph, model.marginals, scores)


def _measure(data: Dataset, m: Marginal, sigma: float, rng: np.random.Generator) -> np.ndarray:
    y = compute_histogram(data, m).cells.copy()
    if sigma > 0:
        y = y + rng.normal(0.0, sigma, y.size)
    return y


def _clamped(targets: Mapping[Marginal, np.ndarray]) -> dict[Marginal, np.ndarray]:
    out = {}
    for m, y in targets.items():
        y = np.clip(y, 0, None)
        out[m] = y if y.sum() > 0 else np.ones_like(y)
    return out


# -- binning ------------------------------------------------------------------

def bin_map(u: int, b: int | None) -> np.ndarray:
    """Equal-width bin of every value in [0, u); identity when u <= b."""
    if b is None or u <= b:
        return np.arange(u)
    if b < 1:
        raise ValueError("bin count must be at least 1")
    return (np.arange(u) * b) // u


def bin_attributes(data: Dataset, b: int | None) -> tuple[Dataset, list[np.ndarray]]:
    maps = [bin_map(u, b) for u in data.schema.sizes]
    sizes = tuple(int(m.max()) + 1 for m in maps)
    # Schema needs domains >= 2; a single-bin column keeps a dummy second code
    sizes = tuple(max(s, 2) for s in sizes)
    cols = [maps[c][data.rows[:, c]] for c in range(data.schema.d)]
    rows = np.stack(cols, axis=1) if cols else data.rows
    return Dataset(Schema(data.schema.names, sizes), rows), maps


@dataclass(frozen=True, eq=False)
class BinningSpec:
    """Per global attribute: value->bin map and one value distribution per bin."""

    maps: Mapping[int, np.ndarray]
    distributions: Mapping[int, tuple[np.ndarray, ...]]

    def __post_init__(self):
        for j, dists in self.distributions.items():
            for dist in dists:
                if (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
                    raise ValueError(f"attribute {j}: value distribution must sum to 1")

    def is_binned(self, j: int) -> bool:
        mp = self.maps[j]
        return int(mp.max()) + 1 < mp.size

    def binned_size(self, j: int) -> int:
        return max(int(self.maps[j].max()) + 1, 2)

    def lift_matrix(self, j: int) -> np.ndarray:
        """(bins, values) matrix whose row l spreads bin l over its values."""
        mp = self.maps[j]
        bins = self.binned_size(j)
        mat = np.zeros((bins, mp.size))
        for l, dist in enumerate(self.distributions[j]):
            members = np.flatnonzero(mp == l)
            mat[l, members] = dist
        return mat


def value_distributions(data: Dataset, maps: Sequence[np.ndarray], eps_per_attr: float | None,
                        rng: np.random.Generator, *, attributes: Sequence[int],
                        ledger: SpendLedger | None = None, party: str = "") -> BinningSpec:
    """Laplace-noised within-bin value frequencies, renormalized per bin.

    Only binned columns are measured; each costs ``eps_per_attr``.
    """
    dists, out_maps = {}, {}
    spent = 0
    for c, mp in enumerate(maps):
        j = int(attributes[c])
        out_maps[j] = np.asarray(mp)
        bins = int(mp.max()) + 1
        if bins == mp.size:
            dists[j] = tuple(np.ones(1) for _ in range(bins))
            continue
        if not eps_per_attr or eps_per_attr <= 0:
            raise ValueError("binned attributes need a positive per-attribute epsilon")
        freq = np.bincount(data.rows[:, c], minlength=mp.size).astype(float)
        if math.isfinite(eps_per_attr):
            freq = freq + rng.laplace(0.0, 1.0 / eps_per_attr, freq.size)
        spent += 1
        per_bin = []
        for l in range(bins):
            f = np.clip(freq[mp == l], 0, None)
            per_bin.append(f / f.sum() if f.sum() > 0 else np.full(f.size, 1.0 / f.size))
        dists[j] = tuple(per_bin)
    if ledger is not None and spent:
        ledger.record(f"binning{':' + party if party else ''}", spent * eps_per_attr, 0.0, RULE_SEQUENTIAL)
    return BinningSpec(out_maps, dists)


# -- message ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PartyMessage:
    """Everything one party sends to the server; the only cross-boundary payload."""

    party_id: int
    attributes: tuple[int, ...]
    names: tuple[str, ...]
    sizes: tuple[int, ...]
    graph: AttributeGraph
    marginals: tuple[Marginal, ...]
    model: MRFModel
    encoding: SketchSet | FOEncodedData
    binning: BinningSpec
    n_hat: float | None
    provenance: Mapping[str, str]

    @property
    def encoder(self) -> str:
        return "fm" if isinstance(self.encoding, SketchSet) else "fo"

    @property
    def schema(self) -> Schema:
        return Schema(self.names, self.sizes)

    def to_global(self, local: Sequence[int]) -> Marginal:
        return Marginal(self.attributes[i] for i in local)

    def to_local(self, marginal: Sequence[int]) -> Marginal:
        return Marginal(self.attributes.index(a) for a in marginal)


class AuditError(RuntimeError):
    pass


_FIELDS_NEEDING_TAGS = ("attributes", "names", "sizes", "graph", "marginals", "model",
                        "encoding", "binning", "n_hat")


def audit_message(msg: PartyMessage) -> None:
    """Structural check: every payload field carries an allowed mechanism tag,
    and no raw table or key material is reachable from the message."""
    for name in _FIELDS_NEEDING_TAGS:
        value = getattr(msg, name)
        if value is None:
            continue
        tag = msg.provenance.get(name)
        if tag is None:
            raise AuditError(f"field {name!r} carries no mechanism tag")
        if tag not in MECHANISMS:
            raise AuditError(f"field {name!r} tagged with unknown mechanism {tag!r}")
    expected = {"encoding": "dpfm" if msg.encoder == "fm" else "grr", "n_hat": "laplace",
                "model": "gaussian-zcdp"}
    for name, tag in expected.items():
        if getattr(msg, name) is not None and msg.provenance.get(name) != tag:
            raise AuditError(f"field {name!r} should come from {tag}")
    _scan(msg, set())


def _scan(obj, seen: set) -> None:
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, (Dataset, KeyRing)):
        raise AuditError(f"message exposes a {type(obj).__name__}")
    if isinstance(obj, dict):
        for v in obj.values():
            _scan(v, seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for v in obj:
            _scan(v, seen)
    elif hasattr(obj, "__dataclass_fields__"):
        for f in obj.__dataclass_fields__:
            _scan(getattr(obj, f), seen)


def build_party_message(party_id: int, attributes: Sequence[int], schema: Schema, local: LocalMRF,
                        encoding: SketchSet | FOEncodedData, binning: BinningSpec,
                        n_hat: float | None = None, *, ledger: SpendLedger | None = None) -> PartyMessage:
    if ledger is not None and not ledger.within_budget():
        raise BudgetExceeded("ledger over budget; refusing to release the message")
    attrs = tuple(int(a) for a in attributes)
    to_global = lambda m: Marginal(attrs[i] for i in m)  # noqa: E731
    graph = AttributeGraph(attrs, frozenset((attrs[a], attrs[b]) for a, b in local.graph.edges))
    provenance = {
        "attributes": "public-schema",
        "names": "public-schema",
        "sizes": "public-schema",
        "graph": "gaussian-zcdp",
        "marginals": "gaussian-zcdp",
        "model": "gaussian-zcdp",
        "encoding": "dpfm" if isinstance(encoding, SketchSet) else "grr",
        "binning": "laplace",
    }
    if n_hat is not None:
        provenance["n_hat"] = "laplace"
    msg = PartyMessage(
        party_id=int(party_id),
        attributes=attrs,
        names=schema.names,
        sizes=schema.sizes,
        graph=graph,
        marginals=tuple(to_global(m) for m in local.marginals),
        model=local.model,
        encoding=encoding,
        binning=binning,
        n_hat=None if n_hat is None else float(n_hat),
        provenance=provenance,
    )
    audit_message(msg)
    return msg
