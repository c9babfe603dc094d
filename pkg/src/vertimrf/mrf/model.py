"""Log-linear Markov random fields over discrete attributes.

``Pr[x]`` is proportional to ``exp(sum_M theta_M[x_M])`` over the marginal set
``S``.  Exact inference runs sum-product on a junction tree of the
triangulated graph; marginals that no clique contains fall back to variable
elimination.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..core import ContingencyHistogram, Dataset, Marginal, Schema, flat_cells
from .graph import AttributeGraph, containing_clique, triangulate

log = logging.getLogger(__name__)


class UnnormalizableModel(ValueError):
    pass


def _broadcast(values: np.ndarray, attrs: Sequence[int], target: Sequence[int]) -> np.ndarray:
    shape = [values.shape[attrs.index(a)] if a in attrs else 1 for a in target]
    return values.reshape(shape)


def logsumexp(values: np.ndarray, axis=None) -> np.ndarray:
    """log(sum(exp(values))) with a max shift; ``-inf`` everywhere gives ``-inf``."""
    top = np.max(values, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _sum_out(values: np.ndarray, attrs: Sequence[int], keep: Iterable[int]) -> np.ndarray:
    keep = set(keep)
    axes = tuple(i for i, a in enumerate(attrs) if a not in keep)
    if not axes:
        return values
    return logsumexp(values, axis=axes)


@dataclass(frozen=True, eq=False)
class MRFModel:
    schema: Schema
    marginals: tuple[Marginal, ...]
    theta: Mapping[Marginal, np.ndarray] = field(repr=False)
    graph: AttributeGraph = field(repr=False)
    total: float = 1.0

    @classmethod
    def create(cls, schema: Schema, marginals: Iterable[Iterable[int]] = (), *,
               graph: AttributeGraph | None = None, theta: Mapping | None = None,
               total: float = 1.0) -> "MRFModel":
        ms = []
        for m in marginals:
            m = Marginal(m).check(schema)
            if m not in ms:
                ms.append(m)
        base = graph if graph is not None else AttributeGraph.empty(range(schema.d))
        if set(base.nodes) != set(range(schema.d)):
            base = AttributeGraph(tuple(range(schema.d)), base.edges)
        needs = base.cliques is None or any(containing_clique(base, m) is None for m in ms)
        if needs:
            base = triangulate(AttributeGraph(base.nodes, base.edges).with_cliques(ms))
        theta = dict(theta or {})
        full = {}
        for m in ms:
            shape = schema.domain(m)
            if m in theta:
                full[m] = np.asarray(theta[m], dtype=float).reshape(shape)
            else:
                full[m] = np.zeros(shape)
        return cls(schema, tuple(ms), full, base, float(total))

    def with_theta(self, theta: Mapping[Marginal, np.ndarray]) -> "MRFModel":
        return MRFModel(self.schema, self.marginals, dict(theta), self.graph, self.total)

    def with_total(self, total: float) -> "MRFModel":
        return MRFModel(self.schema, self.marginals, self.theta, self.graph, float(total))

    def extend(self, marginals: Iterable[Iterable[int]]) -> "MRFModel":
        """Same distribution, larger marginal set (new parameters start at zero)."""
        return MRFModel.create(self.schema, list(self.marginals) + list(marginals),
                               graph=self.graph, theta=self.theta, total=self.total)

    def theta_vector(self) -> np.ndarray:
        if not self.marginals:
            return np.zeros(0)
        return np.concatenate([self.theta[m].ravel() for m in self.marginals])

    # -- inference -----------------------------------------------------------

    @cached_property
    def _assignment(self) -> dict[int, list[Marginal]]:
        out: dict[int, list[Marginal]] = {i: [] for i in range(len(self.graph.cliques))}
        for m in self.marginals:
            out[containing_clique(self.graph, m)].append(m)
        return out

    def clique_potentials(self) -> list[np.ndarray]:
        pots = []
        for i, c in enumerate(self.graph.cliques):
            pot = np.zeros(self.schema.domain(c))
            for m in self._assignment[i]:
                pot = pot + _broadcast(self.theta[m], list(m), list(c))
            pots.append(pot)
        return pots

    @cached_property
    def _order(self) -> tuple[list[int], dict[int, int | None]]:
        cliques = self.graph.cliques
        nbrs = {i: [] for i in range(len(cliques))}
        for i, j in self.graph.tree:
            nbrs[i].append(j)
            nbrs[j].append(i)
        order, parent = [], {}
        for root in range(len(cliques)):
            if root in parent:
                continue
            parent[root] = None
            queue = [root]
            while queue:
                v = queue.pop(0)
                order.append(v)
                for w in sorted(nbrs[v]):
                    if w not in parent:
                        parent[w] = v
                        queue.append(w)
        return order, parent

    @cached_property
    def _calibrated(self) -> tuple[list[np.ndarray], float]:
        cliques = [list(c) for c in self.graph.cliques]
        pots = self.clique_potentials()
        order, parent = self._order
        up: dict[int, np.ndarray] = {}
        children = {i: [] for i in range(len(cliques))}
        for v in order:
            if parent[v] is not None:
                children[parent[v]].append(v)
        for v in reversed(order):
            p = parent[v]
            if p is None:
                continue
            belief = pots[v] + sum((_broadcast(up[c], _sep(cliques, c, v), cliques[v]) for c in children[v]), 0)
            sep = _sep(cliques, v, p)
            up[v] = _sum_out(belief, cliques[v], sep)
        down: dict[int, np.ndarray] = {}
        beliefs: list[np.ndarray] = [None] * len(cliques)
        for v in order:
            incoming = pots[v]
            if parent[v] is not None:
                incoming = incoming + _broadcast(down[v], _sep(cliques, v, parent[v]), cliques[v])
            for c in children[v]:
                incoming = incoming + _broadcast(up[c], _sep(cliques, c, v), cliques[v])
            beliefs[v] = incoming
            for c in children[v]:
                # rebuilt without division so -inf potentials stay exact
                excl = pots[v]
                if parent[v] is not None:
                    excl = excl + _broadcast(down[v], _sep(cliques, v, parent[v]), cliques[v])
                for o in children[v]:
                    if o != c:
                        excl = excl + _broadcast(up[o], _sep(cliques, o, v), cliques[v])
                down[c] = _sum_out(excl, cliques[v], _sep(cliques, c, v))
        roots = [v for v in order if parent[v] is None]
        log_z = float(sum(logsumexp(beliefs[r]) for r in roots))
        if not np.isfinite(log_z):
            raise UnnormalizableModel("every configuration has zero weight")
        # per-component normalization so each belief is a proper log-marginal
        comp_root = {}
        for v in order:
            comp_root[v] = v if parent[v] is None else comp_root[parent[v]]
        norms = {r: logsumexp(beliefs[r]) for r in roots}
        beliefs = [b - norms[comp_root[i]] for i, b in enumerate(beliefs)]
        return beliefs, log_z

    @property
    def log_partition(self) -> float:
        return self._calibrated[1]

    @cached_property
    def _clique_tables(self) -> list[np.ndarray]:
        return [np.exp(b) for b in self._calibrated[0]]

    def clique_marginal(self, i: int) -> np.ndarray:
        """Probability table of clique ``i`` (axes in clique order)."""
        return self._clique_tables[i]

    def infer(self, marginal: Iterable[int]) -> np.ndarray:
        """Probability table over ``marginal`` (axes ascending)."""
        m = Marginal(marginal).check(self.schema)
        if not m:
            return np.ones(())
        i = containing_clique(self.graph, m)
        if i is not None:
            c = self.graph.cliques[i]
            axes = tuple(k for k, a in enumerate(c) if a not in m)
            table = self._clique_tables[i]
            return table.sum(axis=axes) if axes else table.copy()
        logp = self._eliminate(m)
        return np.exp(logp - logsumexp(logp))

    def _eliminate(self, m: Marginal) -> np.ndarray:
        factors = [(list(c), p) for c, p in zip(self.graph.cliques, self.clique_potentials())]
        keep = set(m)
        pending = {a for c, _ in factors for a in c} - keep
        while pending:
            def degree(v):
                touched = set().union(*[set(c) for c, _ in factors if v in c])
                return len(touched)

            v = min(pending, key=lambda x: (degree(x), x))
            pending.discard(v)
            involved = [(c, p) for c, p in factors if v in c]
            rest = [(c, p) for c, p in factors if v not in c]
            scope = sorted(set().union(*[set(c) for c, _ in involved]))
            prod = sum(_broadcast(p, c, scope) for c, p in involved)
            prod = np.broadcast_to(prod, self.schema.domain(Marginal(scope)))
            new_scope = [a for a in scope if a != v]
            rest.append((new_scope, _sum_out(prod, scope, new_scope)))
            factors = rest
        prod = sum(_broadcast(p, c, list(m)) for c, p in factors)
        return np.broadcast_to(prod, self.schema.domain(m)).copy()


def _sep(cliques: list[list[int]], a: int, b: int) -> list[int]:
    return sorted(set(cliques[a]) & set(cliques[b]))


def infer_marginal(model: MRFModel, marginal: Iterable[int]) -> ContingencyHistogram:
    m = Marginal(marginal).check(model.schema)
    p = model.infer(m)
    return ContingencyHistogram(m, model.schema.domain(m), np.ravel(p) * model.total, "counts")


def brute_force_joint(model: MRFModel) -> np.ndarray:
    """Full joint table by direct evaluation of the log-linear form; small models only."""
    shape = model.schema.sizes
    logp = np.zeros(shape)
    full = list(range(model.schema.d))
    for m in model.marginals:
        logp = logp + _broadcast(model.theta[m], list(m), full)
    logp = logp - logsumexp(logp)
    return np.exp(logp)


def sample(model: MRFModel, count: int, rng: np.random.Generator) -> Dataset:
    """Forward sampling along the junction tree."""
    count = int(count)
    d = model.schema.d
    rows = np.full((count, d), -1, dtype=np.int64)
    if count == 0:
        return Dataset(model.schema, rows.reshape(0, d))
    cliques = [list(c) for c in model.graph.cliques]
    order, parent = model._order
    for v in order:
        c = cliques[v]
        prob = model.clique_marginal(v)
        if parent[v] is None:
            sep = []
        else:
            sep = _sep(cliques, v, parent[v])
        new = [a for a in c if a not in sep]
        if not new:
            continue
        perm = [c.index(a) for a in sep + new]
        table = np.transpose(prob, perm)
        sep_dom = [model.schema.sizes[a] for a in sep]
        new_dom = [model.schema.sizes[a] for a in new]
        table = table.reshape(int(np.prod(sep_dom, dtype=np.int64)), -1)
        sep_cells = flat_cells(rows[:, sep], sep_dom)
        out = np.empty(count, dtype=np.int64)
        for s in np.unique(sep_cells):
            idx = np.flatnonzero(sep_cells == s)
            p = table[s]
            tot = p.sum()
            p = p / tot if tot > 0 else np.full(p.size, 1.0 / p.size)
            out[idx] = rng.choice(p.size, size=idx.size, p=p)
        rows[:, new] = np.stack(np.unravel_index(out, new_dom), axis=1)
    return Dataset(model.schema, rows)


@dataclass
class FitResult:
    model: MRFModel
    losses: list[float]
    converged: bool


def _as_target(model: MRFModel, m: Marginal, target) -> np.ndarray:
    if isinstance(target, ContingencyHistogram):
        if Marginal(target.marginal) != m:
            raise ValueError(f"target for {tuple(m)} is over {tuple(target.marginal)}")
        arr = target.cells
    else:
        arr = np.asarray(target, dtype=float).ravel()
    total = arr.sum()
    if not total > 0:
        raise ValueError(f"target {tuple(m)} has no mass")
    return (arr / total).reshape(model.schema.domain(m))


def marginal_loss(model: MRFModel, targets: Mapping[Marginal, np.ndarray],
                  weights: Mapping[Marginal, float]) -> tuple[float, dict[Marginal, np.ndarray]]:
    loss, grads = 0.0, {}
    for m, y in targets.items():
        mu = model.infer(m)
        diff = mu - y
        loss += weights[m] * float(np.sum(diff ** 2))
        grads[m] = 2 * weights[m] * diff
    return loss, grads


def fit_theta(model: MRFModel, targets: Mapping, iterations: int = 1000, *,
              weights: Mapping | None = None, step: float = 1.0, tol: float = 1e-10, rtol: float = 1e-7) -> FitResult:
    """Match the model's marginals to ``targets`` by entropic mirror descent.

    The loss is the weighted squared L2 distance between inferred and target
    distributions.  Steps are chosen by backtracking, so the loss never
    increases between accepted iterates.  Stops when the loss falls below
    ``tol`` or an accepted step gains less than ``rtol`` of the current loss.
    """
    tg = {}
    for m, y in targets.items():
        m = Marginal(m)
        if m not in model.marginals:
            raise ValueError(f"target marginal {tuple(m)} is not in the model")
        tg[m] = _as_target(model, m, y)
    w = {m: float((weights or {}).get(m, 1.0)) for m in tg}
    loss, grads = marginal_loss(model, tg, w)
    losses = [loss]
    converged = loss <= tol
    alpha = step
    for _ in range(iterations):
        if converged:
            break
        mus = {m: model.infer(m) for m in tg}
        accepted = False
        for _ in range(40):
            theta = dict(model.theta)
            for m, g in grads.items():
                theta[m] = theta[m] - alpha * g
            cand = model.with_theta(theta)
            new_loss, new_grads = marginal_loss(cand, tg, w)
            decrease = sum(float(np.sum(grads[m] * (mus[m] - cand.infer(m)))) for m in tg)
            if new_loss <= loss and loss - new_loss >= 0.5 * decrease:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        gained = loss - new_loss
        model, loss, grads = cand, new_loss, new_grads
        losses.append(loss)
        alpha *= 2.0
        if loss <= tol or gained <= rtol * loss:
            converged = True
    if not converged:
        log.warning("fit_theta stopped after %d iterations at loss %.3g", iterations, loss)
    return FitResult(model, losses, converged)
