"""Untrusted-server pipeline: combine party messages into one global MRF and sample it.

Nothing in this module spends privacy budget; every step post-processes the
noisy payloads of :class:`~vertimrf.party.PartyMessage`.  The server accepts
only serialized envelopes or decoded messages and never sees hash keys or
raw tables.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import ContingencyHistogram, Dataset, DegenerateInputError, Marginal, Schema
from .fo import FOEncodedData, car_est_fo, concat_encoded
from .mrf import AttributeGraph, MRFModel, fit_theta, max_clique_domain, r_score, sample, triangulate
from .party import BinningSpec, PartyMessage, audit_message
from .sketch import SketchSet, car_est_sketch, merge_sketch_sets
from .wire import decode_message

log = logging.getLogger(__name__)

Estimator = Callable[[Marginal], ContingencyHistogram]


@dataclass(frozen=True)
class ServerConfig:
    tau: float = 1e5
    d_c: float = 50.0
    rounds: int = 10
    batch: int = 8
    max_cross_arity: int = 3
    error_threshold: float = 0.1
    consistency_iterations: int = 100
    consistency_tol: float = 1e-4
    fit_iterations: int = 500


@dataclass
class ServerState:
    messages: tuple[PartyMessage, ...]
    schema: Schema
    party_of: dict[int, int]
    n_hat: float
    config: ServerConfig
    graph: AttributeGraph | None = None
    model: MRFModel | None = None
    cross: list[Marginal] = field(default_factory=list)
    report: dict = field(default_factory=dict)


def receive(payloads: Iterable[bytes | PartyMessage]) -> tuple[PartyMessage, ...]:
    """Decode envelopes; anything other than bytes or an audited message is refused."""
    out = []
    for p in payloads:
        if isinstance(p, (bytes, bytearray)):
            out.append(decode_message(bytes(p)))
        elif isinstance(p, PartyMessage):
            audit_message(p)
            out.append(p)
        else:
            raise TypeError(f"server accepts party messages only, got {type(p).__name__}")
    return tuple(sorted(out, key=lambda m: m.party_id))


def merge_schema(messages: Sequence[PartyMessage]) -> tuple[Schema, dict[int, int]]:
    """Global schema from the parties' slices; attributes must partition 0..d-1."""
    names, sizes, party_of = {}, {}, {}
    for msg in messages:
        for a, name, u in zip(msg.attributes, msg.names, msg.sizes):
            if a in party_of:
                raise ValueError(f"attribute {a} claimed by parties {party_of[a]} and {msg.party_id}")
            names[a], sizes[a], party_of[a] = name, u, msg.party_id
    d = len(party_of)
    if sorted(party_of) != list(range(d)):
        raise ValueError("party attributes do not cover 0..d-1")
    if len({m.encoder for m in messages}) != 1:
        raise ValueError("parties used different encoders")
    schema = Schema(tuple(names[a] for a in range(d)), tuple(sizes[a] for a in range(d)))
    return schema, party_of


def noisy_count(messages: Sequence[PartyMessage]) -> float:
    counts = [m.n_hat for m in messages if m.n_hat is not None]
    if len(counts) != 1:
        raise ValueError(f"expected exactly one noisy count, got {len(counts)}")
    return counts[0]


def _merged_binning(messages: Sequence[PartyMessage]) -> BinningSpec:
    maps, dists = {}, {}
    for m in messages:
        maps.update(m.binning.maps)
        dists.update(m.binning.distributions)
    return BinningSpec(maps, dists)


def his_rec(low: ContingencyHistogram, binning: BinningSpec) -> ContingencyHistogram:
    """Spread every binned cell over its raw cells by the per-bin value distributions."""
    table = low.table()
    for axis, j in enumerate(low.marginal):
        if j not in binning.maps:
            raise KeyError(f"no value distribution for attribute {j}")
        lift = binning.lift_matrix(j)
        if lift.shape[0] != table.shape[axis]:
            raise ValueError(f"attribute {j}: histogram has {table.shape[axis]} bins, binning has {lift.shape[0]}")
        table = np.moveaxis(np.tensordot(table, lift, axes=([axis], [0])), -1, axis)
    return ContingencyHistogram(low.marginal, table.shape, table.ravel(), "counts")


class CrossEstimator:
    """Histogram estimates over raw attributes from the parties' encodings."""

    def __init__(self, messages: Sequence[PartyMessage], n_hat: float):
        self.n_hat = n_hat
        self.binning = _merged_binning(messages)
        encodings = [m.encoding for m in messages]
        if all(isinstance(e, SketchSet) for e in encodings):
            self._merged = merge_sketch_sets(encodings)
            self._low = lambda m: car_est_sketch(m, self._merged, self.n_hat)
        elif all(isinstance(e, FOEncodedData) for e in encodings):
            self._merged = concat_encoded(encodings)
            self._low = lambda m: car_est_fo(m, self._merged)
        else:
            raise TypeError("mixed encodings")
        self._binned = any(self.binning.is_binned(j) for j in self.binning.maps)
        self._cache: dict[Marginal, ContingencyHistogram] = {}

    def __call__(self, marginal: Iterable[int]) -> ContingencyHistogram:
        m = Marginal(marginal)
        if m not in self._cache:
            low = self._low(m)
            self._cache[m] = his_rec(low, self.binning) if self._binned else low
        return self._cache[m]


def _cross_party(marginal: Iterable[int], party_of: Mapping[int, int]) -> bool:
    return len({party_of[a] for a in marginal}) >= 2


def graph_com(messages: Sequence[PartyMessage], tau: float, estimator: Estimator, n_hat: float,
              schema: Schema | None = None) -> tuple[AttributeGraph, list[tuple[tuple[int, int], float, bool]]]:
    """Union of local graphs plus greedily added cross-party edges by estimated R-score.

    Returns the triangulated graph and ``((a, b), score, added)`` for every
    cross pair in descending score order.
    """
    if schema is None:
        schema, party_of = merge_schema(messages)
    else:
        party_of = {a: m.party_id for m in messages for a in m.attributes}
    edges = set()
    for m in messages:
        edges |= set(m.graph.edges)
    graph = triangulate(AttributeGraph(tuple(range(schema.d)), frozenset(edges)))
    if max_clique_domain(graph, schema) > tau:
        log.warning("union of local graphs already exceeds tau")

    scored = []
    for a, b in combinations(range(schema.d), 2):
        if party_of[a] == party_of[b]:
            continue
        est = estimator(Marginal((a, b)))
        cells = np.clip(est.cells, 0, None)
        s = r_score(est, max(n_hat, 1.0)) if cells.sum() > 0 else 0.0
        scored.append(((a, b), s))
    scored.sort(key=lambda x: (-x[1], x[0]))

    log_rows = []
    for pair, s in scored:
        trial = triangulate(graph.with_edges([pair]))
        ok = max_clique_domain(trial, schema) <= tau
        if ok:
            graph = trial
        log_rows.append((pair, float(s), ok))
    return graph, log_rows


def local_targets(messages: Sequence[PartyMessage]) -> dict[Marginal, np.ndarray]:
    """Every party's local marginals as inferred by its own MRF, in global indices."""
    out = {}
    for msg in messages:
        for m in msg.marginals:
            out[m] = msg.model.infer(msg.to_local(m)).ravel()
    return out


def attribute_marginals(messages: Sequence[PartyMessage]) -> dict[int, ContingencyHistogram]:
    out = {}
    for msg in messages:
        for i, a in enumerate(msg.attributes):
            p = msg.model.infer((i,)).ravel()
            out[a] = ContingencyHistogram((a,), (p.size,), p / p.sum(), "distribution")
    return out


def init_mrf(messages: Sequence[PartyMessage], graph: AttributeGraph, schema: Schema, n_hat: float,
             fit_iterations: int = 500) -> tuple[MRFModel, dict[Marginal, np.ndarray]]:
    """Global model over S = union of local marginal sets, fitted to the local inferences."""
    targets = local_targets(messages)
    model = MRFModel.create(schema, list(targets), graph=graph, total=max(n_hat, 1.0))
    model = fit_theta(model, targets, fit_iterations).model
    return model, targets


def select_cross_marginals(graph: AttributeGraph, party_of: Mapping[int, int], n_hat: float,
                           d_c: float, sizes: Sequence[int], max_arity: int = 3) -> list[Marginal]:
    """Cross-party subsets of the cliques whose average cell count reaches ``d_c``.

    ``sizes`` are the domain sizes the estimates are computed over (binned
    sizes when binning is active).
    """
    if graph.cliques is None:
        graph = triangulate(graph)
    found = set()
    for clique in graph.cliques:
        for k in range(2, min(max_arity, len(clique)) + 1):
            for sub in combinations(clique, k):
                if not _cross_party(sub, party_of):
                    continue
                cells = int(np.prod([sizes[a] for a in sub], dtype=np.int64))
                if n_hat / cells >= d_c:
                    found.add(Marginal(sub))
    return sorted(found, key=lambda m: (len(m), tuple(m)))


def _l1(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.abs(p - q).sum())


def opt_mrf(model: MRFModel, targets: dict[Marginal, np.ndarray], cross: Sequence[Marginal],
            estimator: Estimator, attr_marginals: dict[int, ContingencyHistogram],
            config: ServerConfig, rng: np.random.Generator):
    """Add badly-fitted cross-party marginals to the model, a batch per round.

    Each sampled marginal is estimated, made consistent with the per-attribute
    marginals, and ranked by L1 distance from the model's inference.  The
    worse half (above ``config.error_threshold``) joins the targets and the
    model is refitted; a refit that raises the batch's summed L1 error is
    discarded.  Returns the model, targets, attribute marginals and a log.
    """
    targets = dict(targets)
    attrs = dict(attr_marginals)
    rounds = []
    for r in range(config.rounds):
        pool = [m for m in cross if m not in targets]
        if not pool:
            break
        k = min(config.batch, len(pool))
        batch = [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))]
        estimates, updated = {}, {}
        for m in batch:
            est = estimator(m)
            hist, new_attrs = enforce_consistency(
                est, {a: attrs[a] for a in m},
                iterations=config.consistency_iterations, tol=config.consistency_tol)
            estimates[m] = hist.cells
            updated[m] = new_attrs
        errors = {m: _l1(model.infer(m).ravel(), estimates[m]) for m in batch}
        ranked = sorted(batch, key=lambda m: -errors[m])
        chosen = [m for m in ranked[: max(1, (len(ranked) + 1) // 2)] if errors[m] > config.error_threshold]
        entry = {"round": r, "batch": [list(m) for m in batch],
                 "errors": [errors[m] for m in batch], "added": [], "accepted": False}
        if chosen:
            trial_targets = dict(targets)
            trial_attrs = dict(attrs)
            for m in chosen:
                trial_targets[m] = estimates[m]
                for a, h in updated[m].items():
                    trial_attrs[a] = h
                    trial_targets[Marginal((a,))] = h.cells
            trial = model.extend(list(chosen) + [Marginal((a,)) for m in chosen for a in m])
            trial = fit_theta(trial, trial_targets, config.fit_iterations).model
            before = sum(errors.values())
            after = sum(_l1(trial.infer(m).ravel(), estimates[m]) for m in batch)
            entry["batch_l1_before"], entry["batch_l1_after"] = before, after
            if after <= before + 1e-12:
                model, targets, attrs = trial, trial_targets, trial_attrs
                entry["added"] = [list(m) for m in chosen]
                entry["accepted"] = True
        rounds.append(entry)
    return model, targets, attrs, rounds


def enforce_consistency(cross_hist: ContingencyHistogram, attr_marginals: Mapping[int, ContingencyHistogram],
                        iterations: int = 100, tol: float = 1e-4, n_hat: float | None = None,
                        history: list | None = None):
    """Align a multi-way estimate with per-attribute marginals.

    Each pass moves every attribute marginal and the joint's projection onto
    their mean, spreading the per-value correction evenly over the co-cells,
    then clamps negatives and renormalizes.  Stops once the largest L1 gap
    between a projection and its attribute marginal drops below ``tol``.
    Returns the joint (as counts scaled to ``n_hat`` when given, else as a
    distribution) and the updated attribute marginals.
    """
    m = cross_hist.marginal
    dom = cross_hist.domain
    h = np.clip(cross_hist.table(), 0, None).astype(float)
    if not h.sum() > 0:
        raise DegenerateInputError("cross histogram has no mass")
    h = h / h.sum()
    tgt = {}
    for axis, a in enumerate(m):
        t = np.clip(np.asarray(attr_marginals[a].cells, dtype=float), 0, None)
        if t.size != dom[axis]:
            raise ValueError(f"attribute {a}: marginal has {t.size} values, histogram {dom[axis]}")
        if not t.sum() > 0:
            raise DegenerateInputError(f"attribute {a} marginal has no mass")
        tgt[a] = t / t.sum()

    def gap():
        return max(_l1(_project(h, axis), tgt[a]) for axis, a in enumerate(m))

    current = gap()
    if history is not None:
        history.append(current)
    for _ in range(iterations):
        if current < tol:
            break
        for axis, a in enumerate(m):
            proj = _project(h, axis)
            mean = (tgt[a] + proj) / 2
            tgt[a] = mean
            shape = [1] * len(dom)
            shape[axis] = dom[axis]
            h = h + ((mean - proj) / (h.size / dom[axis])).reshape(shape)
        h = np.clip(h, 0, None)
        h = h / h.sum()
        current = gap()
        if history is not None:
            history.append(current)
    out = ContingencyHistogram(m, dom, h.ravel(), "distribution")
    if n_hat is not None:
        out = out.scaled(n_hat)
    attrs = {a: ContingencyHistogram((a,), (t.size,), t / t.sum(), "distribution") for a, t in tgt.items()}
    return out, attrs


def _project(h: np.ndarray, axis: int) -> np.ndarray:
    others = tuple(i for i in range(h.ndim) if i != axis)
    return h.sum(axis=others) if others else h


def synthesize(model: MRFModel, n_hat: float, rng: np.random.Generator) -> Dataset:
    return sample(model, int(round(max(n_hat, 0.0))), rng)


def run_server(payloads: Iterable[bytes | PartyMessage], config: ServerConfig,
               rng: np.random.Generator) -> ServerState:
    """GraphCom, InitMRF, cross-marginal selection and OptMRF over received messages."""
    messages = receive(payloads)
    schema, party_of = merge_schema(messages)
    n_hat = noisy_count(messages)
    state = ServerState(messages, schema, party_of, n_hat, config)
    estimator = CrossEstimator(messages, n_hat)

    graph, scored = graph_com(messages, config.tau, estimator, n_hat, schema)
    model, targets = init_mrf(messages, graph, schema, n_hat, config.fit_iterations)
    binning = estimator.binning
    enc_sizes = [binning.binned_size(a) if binning.is_binned(a) else schema.sizes[a] for a in range(schema.d)]
    cross = select_cross_marginals(graph, party_of, n_hat, config.d_c, enc_sizes, config.max_cross_arity)
    attrs = attribute_marginals(messages)
    model, targets, attrs, rounds = opt_mrf(model, targets, cross, estimator, attrs, config, rng)

    state.graph, state.model, state.cross = model.graph, model, cross
    state.report = {
        "n_hat": n_hat,
        "edges": [{"pair": list(p), "score": s, "added": ok} for p, s, ok in scored],
        "local_marginals": [list(m) for m in local_targets(messages)],
        "cross_marginals": [list(m) for m in cross],
        "model_marginals": [list(m) for m in model.marginals],
        "cliques": [list(c) for c in model.graph.cliques],
        "rounds": rounds,
    }
    return state
