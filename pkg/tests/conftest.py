import numpy as np
import pytest

from vertimrf.core import Dataset, Schema


@pytest.fixture
def hobby_table():
    """Three people: gender, age band, hobby."""
    schema = Schema(("gender", "age", "hobby"), (2, 2, 2))
    # gender male=0 female=1; age 10-20=0 20-30=1; hobby cook=0 basketball=1
    rows = np.array([[0, 1, 0], [1, 1, 1], [1, 0, 0]])
    return Dataset(schema, rows)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, sizes, n):
    schema = Schema(tuple(f"x{i}" for i in range(len(sizes))), tuple(sizes))
    rows = np.stack([rng.integers(0, u, n) for u in sizes], axis=1) if n else np.zeros((0, len(sizes)))
    return Dataset(schema, rows)


def _payloads(encoder, **kw):
    from vertimrf.harness.config import RunConfig
    from vertimrf.harness.experiment import load_input, resolve_assignment, run_parties

    cfg = RunConfig(assignment="planted", encoder=encoder, t=200, planted_n=4000, **kw)
    data, _ = load_input(cfg)
    payloads, ledger = run_parties(data, resolve_assignment(cfg, data), cfg, np.random.SeedSequence(1))
    return data, payloads, ledger


@pytest.fixture(scope="session")
def fm_run():
    return _payloads("fm")


@pytest.fixture(scope="session")
def fo_run():
    return _payloads("fo")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
