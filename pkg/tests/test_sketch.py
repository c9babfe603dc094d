import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vertimrf.core import Dataset, Schema, compute_histogram
from vertimrf.keys import KeyOracle, UnknownKey
from vertimrf.privacy import PrivacyBudget, SpendLedger, per_repeat_epsilon
from vertimrf.sketch import (
    IncompatibleSketches,
    SketchParams,
    SketchSet,
    alpha_floor,
    car_est_sketch,
    dpfm,
    estimate_cardinality,
    harmonic_mean,
    hash_geometric,
    loc_enc_sketch,
    membership,
    merge_max,
    merge_sketch_sets,
    phantom_count,
)


@pytest.fixture(scope="module")
def ring():
    return KeyOracle(99, 256).ring()


def test_phantom_count_and_floor():
    assert phantom_count(0.5) == 2
    assert alpha_floor(0.1, 0.5) == 10
    p = SketchParams(0.1, 3, 0.5, (0, 1, 2))
    assert (p.k_p, p.alpha_min) == (2, 10)


def test_params_validation():
    with pytest.raises(ValueError):
        SketchParams(1.5, 1, 0.5, (0,))
    with pytest.raises(ValueError):
        SketchParams(0.1, 2, 0.5, (0, 0))


def test_hash_geometric_is_deterministic(ring):
    assert hash_geometric(17, 3, 0.1, ring) == hash_geometric(17, 3, 0.1, ring)
    with pytest.raises(UnknownKey):
        hash_geometric(17, 10_000, 0.1, ring)


def test_hash_geometric_distribution(ring):
    gamma = 0.1
    g = hash_geometric(np.arange(100_000), [5], gamma, ring)[:, 0]
    # chi-square against Geometric(gamma/(1+gamma)), tail pooled
    edges = list(range(40))
    p = [(1 + gamma) ** -k - (1 + gamma) ** -(k + 1) for k in edges] + [(1 + gamma) ** -40]
    obs = [np.sum(g == k) for k in edges] + [np.sum(g >= 40)]
    exp = np.array(p) * g.size
    stat = float(np.sum((np.array(obs) - exp) ** 2 / exp))
    # 40 degrees of freedom; 63.7 is the 0.99 quantile
    assert stat < 63.7


def test_duplicate_ids_hash_once(ring):
    params = SketchParams(0.1, 1, 100.0, (0,))
    a = dpfm([4, 4, 9], params, 0, ring, np.random.default_rng(0))
    b = dpfm([4, 9], params, 0, ring, np.random.default_rng(0))
    assert a == b


def test_dpfm_floor_on_empty_set(ring):
    params = SketchParams(0.1, 1, 0.05, (0,))
    for s in range(20):
        assert dpfm([], params, 0, ring, np.random.default_rng(s)) >= params.alpha_min


def test_membership_sets(hobby_table):
    sets = membership(hobby_table, 0)
    assert [s.tolist() for s in sets] == [[0], [1, 2]]


def test_merge_max():
    assert merge_max([3]) == 3
    assert merge_max([2, 7, 5]) == 7
    with pytest.raises(ValueError):
        merge_max([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=2, max_size=20), st.integers(1, 19))
def test_merge_max_regroups(values, cut):
    cut = min(cut, len(values) - 1)
    assert merge_max([merge_max(values[:cut]), merge_max(values[cut:])]) == merge_max(values)


def test_harmonic_mean():
    assert harmonic_mean([4, 4, 4]) == pytest.approx(4)
    assert harmonic_mean([1, 3]) == pytest.approx(1.5)
    assert harmonic_mean([3, 1]) == harmonic_mean([1, 3])
    with pytest.raises(ValueError):
        harmonic_mean([])
    with pytest.raises(ValueError):
        harmonic_mean([1, 0])


def test_sketch_set_shape_and_size(ring):
    rng = np.random.default_rng(0)
    schema = Schema(tuple(f"x{i}" for i in range(8)), (2,) * 8)
    data = Dataset(schema, rng.integers(0, 2, (500, 8)))
    s = loc_enc_sketch(data, range(8), PrivacyBudget(1.0, 1e-5), 0.1, 64, ring, rng, d_global=16)
    assert len(s) == 64 * 16
    assert s.attributes == tuple(range(8))
    assert s[(3, 1, 10)] >= s.params.alpha_min
    assert s.params.eps_prime == pytest.approx(per_repeat_epsilon(1.0, 1e-5, 64, 16))


def test_sketch_encoding_records_one_spend(ring):
    rng = np.random.default_rng(0)
    data = Dataset(Schema(("a", "b"), (2, 3)), rng.integers(0, 2, (100, 2)))
    ledger = SpendLedger(PrivacyBudget(1.0, 1e-5))
    loc_enc_sketch(data, (0, 1), PrivacyBudget(1.0, 1e-5), 0.1, 16, ring, rng, d_global=2, ledger=ledger)
    assert len(ledger.entries) == 1
    assert ledger.total()[0] == pytest.approx(1.0)


def test_encoding_matches_dpfm_definition(ring):
    """With a huge epsilon (no phantoms, floor 0) each sketch is the max hash of its id set."""
    rng = np.random.default_rng(1)
    data = Dataset(Schema(("a",), (3,)), rng.integers(0, 3, (200, 1)))
    s = loc_enc_sketch(data, (0,), PrivacyBudget(1e6, 0.5), 0.1, 8, ring, rng, d_global=1)
    assert s.params.k_p == 1 and s.params.alpha_min == 0
    for v, ids in enumerate(membership(data, 0)):
        expect = hash_geometric(ids, list(range(8)), 0.1, ring).max(axis=0)
        assert np.all(s.sketches[0][v] >= expect)


def test_merge_rejects_mismatched_params(ring):
    a = SketchSet(SketchParams(0.1, 1, 0.5, (0,)), {0: np.full((2, 1), 10)})
    b = SketchSet(SketchParams(0.1, 1, 0.4, (0,)), {1: np.full((2, 1), 12)})
    with pytest.raises(IncompatibleSketches):
        merge_sketch_sets([a, b])


def test_sketch_set_rejects_values_below_floor():
    with pytest.raises(ValueError):
        SketchSet(SketchParams(0.1, 1, 0.5, (0,)), {0: np.zeros((2, 1))})


def test_cardinality_within_ten_percent(ring):
    """Balanced binary column, n=10^4: each value's count recovered within 10% in 95% of trials."""
    n, t, gamma, trials = 10_000, 2000, 0.1, 100
    oracle = KeyOracle(5, t)
    ring = oracle.ring()
    ids = np.arange(n)
    g = hash_geometric(ids, oracle.key_ids, gamma, ring)
    col = np.random.default_rng(0).permutation(np.repeat([0, 1], n // 2))
    sketches_true = np.stack([g[col == v].max(axis=0) for v in (0, 1)])
    eps_prime = 0.5
    params = SketchParams(gamma, t, eps_prime, oracle.key_ids)
    from vertimrf.privacy import max_geometric

    rng = np.random.default_rng(2)
    good = 0
    for _ in range(trials):
        ph = max_geometric(gamma, params.k_p, rng, size=(2, t))
        sk = np.maximum(np.maximum(sketches_true, ph), params.alpha_min)
        est = estimate_cardinality(sk, gamma, params.k_p)
        good += bool(np.all(np.abs(est - n / 2) <= 0.1 * n / 2))
    assert good >= 95


def test_car_est_clamps_negative_cells():
    params = SketchParams(0.1, 4, 0.5, (0, 1, 2, 3))
    # complement sketches huge => estimate above n_hat => clamped to 0
    s = SketchSet(params, {0: np.full((2, 4), 200), 1: np.full((2, 4), 200)})
    h = car_est_sketch((0, 1), s, n_hat=10.0)
    assert np.all(h.cells == 0)


def test_car_est_two_way_is_close(ring):
    rng = np.random.default_rng(4)
    n, t = 20_000, 1000
    oracle = KeyOracle(8, t)
    data = Dataset(Schema(("a", "b"), (2, 2)), rng.integers(0, 2, (n, 2)))
    s = loc_enc_sketch(data, (0, 1), PrivacyBudget(50.0, 1e-5), 0.1, t, oracle.ring(), rng, d_global=2)
    est = car_est_sketch((0, 1), s, n)
    truth = compute_histogram(data, (0, 1)).cells
    assert np.all(np.abs(est.cells - truth) < 0.1 * n)
