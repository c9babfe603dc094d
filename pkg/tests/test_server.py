import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vertimrf.server as server
from vertimrf.core import ContingencyHistogram, Marginal, Schema, tvd
from vertimrf.keys import KeyOracle
from vertimrf.mrf import AttributeGraph, MRFModel, max_clique_domain, triangulate
from vertimrf.party import BinningSpec
from vertimrf.server import (
    CrossEstimator,
    ServerConfig,
    enforce_consistency,
    graph_com,
    his_rec,
    init_mrf,
    merge_schema,
    noisy_count,
    opt_mrf,
    receive,
    run_server,
    select_cross_marginals,
    synthesize,
)


def _uniform_spec(j, u, b):
    mp = (np.arange(u) * b) // u
    dists = tuple(np.full(int((mp == l).sum()), 1.0 / (mp == l).sum()) for l in range(b))
    return BinningSpec({j: mp}, {j: dists})


def test_his_rec_spreads_uniformly():
    spec = _uniform_spec(0, 8, 2)
    low = ContingencyHistogram((0,), (2,), [100, 40])
    out = his_rec(low, spec)
    np.testing.assert_allclose(out.cells, [25] * 4 + [10] * 4)


def test_his_rec_identity_without_binning():
    spec = BinningSpec({0: np.arange(3), 1: np.arange(2)},
                       {0: tuple(np.ones(1) for _ in range(3)), 1: tuple(np.ones(1) for _ in range(2))})
    low = ContingencyHistogram((0, 1), (3, 2), np.arange(6.0))
    np.testing.assert_array_equal(his_rec(low, spec).cells, low.cells)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 9), st.integers(2, 3))
def test_his_rec_conserves_mass(seed, u, b):
    rng = np.random.default_rng(seed)
    mp = (np.arange(u) * b) // u
    dists = tuple(rng.dirichlet(np.ones(int((mp == l).sum()))) for l in range(b))
    spec = BinningSpec({0: mp, 1: np.arange(2)}, {0: dists, 1: (np.ones(1), np.ones(1))})
    low = ContingencyHistogram((0, 1), (b, 2), rng.uniform(0, 50, 2 * b))
    out = his_rec(low, spec)
    assert out.cells.sum() == pytest.approx(low.cells.sum())
    # re-binning recovers the binned table
    back = np.zeros((b, 2))
    np.add.at(back, mp, out.table())
    np.testing.assert_allclose(back, low.table())


def _dist(m, cells, dom):
    return ContingencyHistogram(m, dom, np.asarray(cells, float), "distribution")


def test_consistency_one_pass_moves_to_the_mean():
    joint = _dist((0, 1), [0.3, 0.3, 0.2, 0.2], (2, 2))
    attrs = {0: _dist((0,), [0.5, 0.5], (2,)), 1: _dist((1,), [0.5, 0.5], (2,))}
    _, new = enforce_consistency(joint, attrs, iterations=1)
    np.testing.assert_allclose(new[0].cells, [0.55, 0.45])


def test_consistency_fixed_point_and_monotone():
    joint = _dist((0, 1), [0.25, 0.25, 0.25, 0.25], (2, 2))
    attrs = {0: _dist((0,), [0.5, 0.5], (2,)), 1: _dist((1,), [0.5, 0.5], (2,))}
    hist = []
    out, new = enforce_consistency(joint, attrs, history=hist)
    assert hist == [0.0]
    np.testing.assert_allclose(out.cells, joint.cells)

    rng = np.random.default_rng(0)
    joint = _dist((0, 1, 2), rng.dirichlet(np.ones(12)), (2, 3, 2))
    attrs = {a: _dist((a,), rng.dirichlet(np.ones(u)), (u,)) for a, u in zip((0, 1, 2), (2, 3, 2))}
    hist = []
    out, new = enforce_consistency(joint, attrs, history=hist, n_hat=500)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < 1e-4
    assert out.total == pytest.approx(500)
    for axis, a in enumerate((0, 1, 2)):
        assert tvd(out.project((a,)), new[a]) < 1e-4


def test_select_cross_marginals():
    graph = triangulate(AttributeGraph((0, 1, 2, 3), frozenset({(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)})))
    party_of = {0: 0, 1: 0, 2: 1, 3: 1}
    got = select_cross_marginals(graph, party_of, 400, 50, (2, 2, 2, 2))
    assert len(got) == 8
    assert Marginal((0, 1)) not in got
    got = select_cross_marginals(graph, party_of, 399, 50, (2, 2, 2, 2))
    assert got == [Marginal(p) for p in [(0, 2), (0, 3), (1, 2), (1, 3)]]
    assert select_cross_marginals(graph, {a: 0 for a in range(4)}, 1e6, 50, (2,) * 4) == []


def _coupled_estimator(pair, n=1000):
    def est(m):
        if tuple(m) == pair:
            return ContingencyHistogram(m, (2, 2), [n / 2, 0, 0, n / 2])
        return ContingencyHistogram(m, (2, 2), [n / 4] * 4)
    return est


def test_graph_com_orders_and_respects_tau(fm_run):
    messages = receive(fm_run[1])
    graph, log = graph_com(messages, 1e5, _coupled_estimator((1, 3)), 1000)
    assert log[0][0] == (1, 3) and log[0][1] == pytest.approx(500)
    assert len(log) == 9 and all(ok for *_, ok in log)
    tight, log = graph_com(messages, 4, _coupled_estimator((1, 3)), 1000)
    assert tight.has_edge(1, 3)
    assert max_clique_domain(tight, (2,) * 6) <= 4
    assert not all(ok for *_, ok in log)


def test_init_mrf_with_one_party(fm_run):
    solo = receive(fm_run[1])[0]
    schema, _ = merge_schema([solo])
    graph = triangulate(solo.graph)
    model, targets = init_mrf([solo], graph, schema, 100.0)
    assert set(model.marginals) == set(solo.marginals)
    for m in solo.marginals:
        np.testing.assert_allclose(model.infer(m), solo.model.infer(solo.to_local(m)), atol=1e-3)


def test_opt_mrf_with_no_rounds_is_identity(fm_run):
    messages = receive(fm_run[1])
    schema, party_of = merge_schema(messages)
    n_hat = noisy_count(messages)
    est = CrossEstimator(messages, n_hat)
    graph, _ = graph_com(messages, 1e5, est, n_hat, schema)
    model, targets = init_mrf(messages, graph, schema, n_hat)
    cross = select_cross_marginals(graph, party_of, n_hat, 50, schema.sizes)
    out, t2, _, log = opt_mrf(model, targets, cross, est, server.attribute_marginals(messages),
                              ServerConfig(rounds=0), np.random.default_rng(0))
    assert out is model and t2 == targets and log == []


def test_run_server_report(fm_run):
    state = run_server(fm_run[1], ServerConfig(), np.random.default_rng(0))
    top = state.report["edges"][0]["pair"]
    assert top in ([1, 3], [2, 5])
    assert state.model.total == pytest.approx(state.n_hat)
    assert any(len(set(state.party_of[a] for a in m)) == 2 for m in state.model.marginals)


def test_synthesize_sizes():
    model = MRFModel.create(Schema(("a", "b"), (2, 2)), [(0, 1)])
    assert synthesize(model, -5.0, np.random.default_rng(0)).n == 0
    assert synthesize(model, 10.4, np.random.default_rng(0)).n == 10


def test_server_has_no_key_or_table_capability(fm_run):
    assert not any(name in vars(server) for name in ("KeyRing", "KeyOracle", "load_csv"))
    data = fm_run[0]
    with pytest.raises(TypeError):
        receive([data])
    with pytest.raises(TypeError):
        receive([KeyOracle(0, 4).ring()])
