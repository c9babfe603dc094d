"""Attribute graphs, min-fill triangulation and junction trees."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from ..core import Marginal, Schema


@dataclass(frozen=True)
class AttributeGraph:
    """Undirected graph over attribute indices.

    ``cliques`` and ``tree`` are filled in by :func:`triangulate`; ``tree``
    lists junction-tree edges as pairs of clique positions.
    """

    nodes: tuple[int, ...]
    edges: frozenset = frozenset()
    cliques: tuple[Marginal, ...] | None = None
    tree: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        nodes = tuple(sorted(int(v) for v in set(self.nodes)))
        edges = set()
        for e in self.edges:
            a, b = (int(x) for x in e)
            if a == b:
                raise ValueError(f"self loop on {a}")
            if a not in nodes or b not in nodes:
                raise ValueError(f"edge {(a, b)} uses a node outside the graph")
            edges.add((min(a, b), max(a, b)))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", frozenset(edges))

    @classmethod
    def empty(cls, nodes: Iterable[int]) -> "AttributeGraph":
        return cls(tuple(nodes))

    @property
    def is_triangulated(self) -> bool:
        return self.cliques is not None

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def with_edges(self, extra: Iterable[tuple[int, int]]) -> "AttributeGraph":
        return AttributeGraph(self.nodes, self.edges | {tuple(sorted(e)) for e in extra})

    def with_cliques(self, groups: Iterable[Iterable[int]]) -> "AttributeGraph":
        """Add every edge needed to make each group a complete subgraph."""
        extra = set()
        for g in groups:
            extra.update(combinations(sorted(g), 2))
        return self.with_edges(extra)

    def union(self, other: "AttributeGraph") -> "AttributeGraph":
        return AttributeGraph(self.nodes + other.nodes, self.edges | other.edges)

    def neighbors(self) -> dict[int, set[int]]:
        adj = {v: set() for v in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.edges)
        return g

    def adjacency(self, order: Sequence[int] | None = None) -> np.ndarray:
        order = list(self.nodes if order is None else order)
        pos = {v: i for i, v in enumerate(order)}
        mat = np.zeros((len(order), len(order)), dtype=bool)
        for a, b in self.edges:
            mat[pos[a], pos[b]] = mat[pos[b], pos[a]] = True
        return mat

    @classmethod
    def from_adjacency(cls, nodes: Sequence[int], mat: np.ndarray) -> "AttributeGraph":
        nodes = list(nodes)
        ii, jj = np.nonzero(np.triu(np.asarray(mat, dtype=bool), 1))
        return cls(tuple(nodes), frozenset((nodes[i], nodes[j]) for i, j in zip(ii, jj)))


def _min_fill_order(adj: dict[int, set[int]]) -> list[tuple[int, set[int]]]:
    adj = {v: set(n) for v, n in adj.items()}
    steps = []
    while adj:
        def fill(v):
            nb = list(adj[v])
            return sum(1 for a, b in combinations(nb, 2) if b not in adj[a])

        v = min(adj, key=lambda x: (fill(x), len(adj[x]), x))
        nb = adj.pop(v)
        steps.append((v, set(nb)))
        for a, b in combinations(nb, 2):
            adj[a].add(b)
            adj[b].add(a)
        for a in nb:
            adj[a].discard(v)
    return steps


def triangulate(graph: AttributeGraph) -> AttributeGraph:
    """Chordal completion by greedy min-fill elimination, with cliques and junction tree."""
    steps = _min_fill_order(graph.neighbors())
    edges = set(graph.edges)
    candidates = []
    for v, nb in steps:
        for a, b in combinations(sorted(nb), 2):
            edges.add((a, b))
        candidates.append(frozenset(nb | {v}))
    maximal = []
    for c in sorted(set(candidates), key=lambda s: (-len(s), sorted(s))):
        if not any(c < m for m in maximal):
            maximal.append(c)
    cliques = tuple(Marginal(c) for c in sorted(maximal, key=sorted))
    return AttributeGraph(graph.nodes, frozenset(edges), cliques, _junction_tree(cliques))


def _junction_tree(cliques: Sequence[Marginal]) -> tuple[tuple[int, int], ...]:
    if len(cliques) <= 1:
        return ()
    g = nx.Graph()
    g.add_nodes_from(range(len(cliques)))
    for i, j in combinations(range(len(cliques)), 2):
        g.add_edge(i, j, weight=len(set(cliques[i]) & set(cliques[j])))
    tree = nx.maximum_spanning_tree(g, algorithm="kruskal")
    return tuple(sorted((min(i, j), max(i, j)) for i, j in tree.edges))


def is_chordal(graph: AttributeGraph) -> bool:
    return nx.is_chordal(graph.to_networkx())


def running_intersection(graph: AttributeGraph) -> bool:
    """Every attribute's cliques form a connected subtree of the junction tree."""
    if graph.cliques is None:
        raise ValueError("graph is not triangulated")
    tree = nx.Graph()
    tree.add_nodes_from(range(len(graph.cliques)))
    tree.add_edges_from(graph.tree)
    if not nx.is_tree(tree):
        return False
    for v in graph.nodes:
        holding = [i for i, c in enumerate(graph.cliques) if v in c]
        if not nx.is_connected(tree.subgraph(holding)):
            return False
    return True


def max_clique_domain(graph: AttributeGraph, schema: Schema | Sequence[int]) -> int:
    sizes = schema.sizes if isinstance(schema, Schema) else tuple(schema)
    if graph.cliques is None:
        graph = triangulate(graph)
    return max(int(np.prod([sizes[a] for a in c], dtype=np.int64)) for c in graph.cliques)


def containing_clique(graph: AttributeGraph, marginal: Iterable[int]) -> int | None:
    m = set(marginal)
    best = None
    for i, c in enumerate(graph.cliques or ()):
        if m <= set(c) and (best is None or len(c) < len(graph.cliques[best])):
            best = i
    return best
