import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vertimrf.core import ContingencyHistogram, DegenerateInputError, Marginal, Schema, compute_histogram, tvd
from vertimrf.mrf import (
    R_SCORE_SENSITIVITY,
    AttributeGraph,
    MRFModel,
    brute_force_joint,
    containing_clique,
    fit_theta,
    infer_marginal,
    is_chordal,
    max_clique_domain,
    r_score,
    running_intersection,
    sample,
    theta_useful,
    triangulate,
)

from .conftest import random_dataset


def _cycle(k):
    return AttributeGraph(tuple(range(k)), frozenset((i, (i + 1) % k) for i in range(k)))


def test_four_cycle_gets_one_chord():
    g = triangulate(_cycle(4))
    assert len(g.edges) == 5
    assert is_chordal(g)
    assert len(g.cliques) == 2 and all(len(c) == 3 for c in g.cliques)
    assert running_intersection(g)


def test_triangulating_chordal_graph_adds_nothing():
    tri = AttributeGraph((0, 1, 2, 3), frozenset({(0, 1), (1, 2), (0, 2), (2, 3)}))
    assert triangulate(tri).edges == tri.edges


def test_empty_graph_has_singleton_cliques():
    g = triangulate(AttributeGraph.empty(range(3)))
    assert g.cliques == (Marginal((0,)), Marginal((1,)), Marginal((2,)))
    assert running_intersection(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_triangulation_properties(k, p, seed):
    base = nx.gnp_random_graph(k, p, seed=seed)
    g = AttributeGraph(tuple(range(k)), frozenset(base.edges))
    t = triangulate(g)
    assert g.edges <= t.edges
    assert is_chordal(t)
    assert running_intersection(t)
    # cliques are exactly the maximal cliques of the chordal completion
    want = {frozenset(c) for c in nx.find_cliques(t.to_networkx())}
    assert {frozenset(c) for c in t.cliques} == want


def test_max_clique_domain():
    g = AttributeGraph((0, 1, 2), frozenset({(0, 1)}))
    assert max_clique_domain(g, (3, 4, 5)) == 12
    assert max_clique_domain(AttributeGraph.empty(range(3)), (3, 4, 5)) == 5


def test_containing_clique_picks_smallest():
    g = triangulate(AttributeGraph((0, 1, 2, 3), frozenset({(0, 1), (1, 2), (0, 2), (2, 3)})))
    i = containing_clique(g, (2, 3))
    assert set(g.cliques[i]) == {2, 3}
    assert containing_clique(g, (0, 3)) is None


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        AttributeGraph((0, 1), frozenset({(0, 0)}))
    with pytest.raises(ValueError):
        AttributeGraph((0, 1), frozenset({(0, 5)}))


def test_theta_useful():
    assert theta_useful(8, 320, 4, 10)
    assert not theta_useful(8, 319, 4, 10)


def _pair(cells, dom=(2, 2)):
    return ContingencyHistogram((0, 1), dom, np.asarray(cells, float))


def test_r_score_examples():
    assert r_score(_pair([25, 25, 25, 25]), 100) == pytest.approx(0)
    # perfectly coupled: joint 0.5 on the diagonal, product 0.25 everywhere
    assert r_score(_pair([50, 0, 0, 50]), 100) == pytest.approx(50)
    with pytest.raises(DegenerateInputError):
        r_score(_pair([0, 0, 0, 0]), 1)
    with pytest.raises(ValueError):
        r_score(ContingencyHistogram((0,), (2,), [1, 1]), 2)


def test_noisy_r_score_needs_rng():
    with pytest.raises(ValueError):
        r_score(_pair([1, 2, 3, 4]), 10, sigma_r=1.0)
    a = r_score(_pair([1, 2, 3, 4]), 10, 1.0, np.random.default_rng(0))
    b = r_score(_pair([1, 2, 3, 4]), 10, 1.0, np.random.default_rng(0))
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(2, 2), (2, 3), (3, 4)]), st.integers(2, 40))
def test_r_score_sensitivity_bound(seed, dom, n):
    """Removing one record moves (count-scaled) R by at most the declared sensitivity."""
    rng = np.random.default_rng(seed)
    cells = rng.multinomial(n, rng.dirichlet(np.ones(dom[0] * dom[1]) * 0.3)).astype(float)
    for c in np.flatnonzero(cells):
        less = cells.copy()
        less[c] -= 1
        full = r_score(_pair(cells, dom), n)
        small = r_score(_pair(less, dom), n - 1) if less.sum() > 0 else 0.0
        assert abs(full - small) <= R_SCORE_SENSITIVITY + 1e-9


def _chain_model(seed=0):
    schema = Schema(("a", "b", "c", "d"), (2, 3, 2, 2))
    rng = np.random.default_rng(seed)
    model = MRFModel.create(schema, [(0, 1), (1, 2), (2, 3), (0,)])
    theta = {m: rng.normal(size=schema.domain(m)) for m in model.marginals}
    return model.with_theta(theta)


def test_inference_matches_brute_force():
    model = _chain_model()
    joint = brute_force_joint(model)
    assert joint.sum() == pytest.approx(1)
    for k in (1, 2, 3):
        for m in itertools.combinations(range(4), k):
            keep = tuple(i for i in range(4) if i not in m)
            expect = joint.sum(axis=keep)
            np.testing.assert_allclose(model.infer(m), expect, atol=1e-10)


def test_zero_theta_gives_uniform():
    model = MRFModel.create(Schema(("a", "b"), (2, 4)), [(0, 1)])
    np.testing.assert_allclose(model.infer((0, 1)), np.full((2, 4), 1 / 8))


def test_infer_marginal_scales_by_total():
    model = _chain_model().with_total(500)
    h = infer_marginal(model, (1,))
    assert h.total == pytest.approx(500)


def test_fit_recovers_consistent_targets():
    schema = Schema(("a", "b", "c"), (2, 3, 2))
    data = random_dataset(np.random.default_rng(5), schema.sizes, 3000)
    targets = {Marginal(m): compute_histogram(data, m) for m in [(0, 1), (1, 2)]}
    model = MRFModel.create(schema, targets)
    res = fit_theta(model, targets, 2000)
    assert all(b <= a + 1e-15 for a, b in zip(res.losses, res.losses[1:]))
    for m, h in targets.items():
        fitted = infer_marginal(res.model.with_total(h.total), m)
        assert tvd(fitted, h) < 1e-3


def test_fit_rejects_unknown_target():
    model = MRFModel.create(Schema(("a", "b"), (2, 2)), [(0,)])
    with pytest.raises(ValueError):
        fit_theta(model, {(1,): np.array([1.0, 1.0])})


def test_extend_keeps_distribution():
    model = _chain_model()
    bigger = model.extend([(0, 3)])
    np.testing.assert_allclose(bigger.infer((0, 3)), model.infer((0, 3)), atol=1e-10)


def test_sampling_reproduces_marginals():
    model = _chain_model(3)
    data = sample(model, 40_000, np.random.default_rng(0))
    for m in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        emp = compute_histogram(data, m)
        assert tvd(emp, infer_marginal(model, m)) < 0.02


def test_sampling_edge_cases():
    model = _chain_model()
    assert sample(model, 0, np.random.default_rng(0)).n == 0
    a = sample(model, 50, np.random.default_rng(9))
    b = sample(model, 50, np.random.default_rng(9))
    assert np.array_equal(a.rows, b.rows)
