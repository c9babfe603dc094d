import json

import numpy as np
import pytest
from click.testing import CliRunner

from vertimrf.core import Dataset, DomainError, Schema
from vertimrf.harness import (
    Domain,
    RunConfig,
    eval_lway_tvd,
    load_csv,
    planted_dataset,
    run_experiment,
    run_pipeline,
    split_attributes,
    write_csv,
)
from vertimrf.harness.cli import main

from .conftest import random_dataset

FAST = dict(planted_n=3000, t=100, eval_l=(2, 3), eval_samples=20)


def _schema(d, u=2):
    return Schema(tuple(f"x{i}" for i in range(d)), (u,) * d)


def test_uniform_split():
    parts = split_attributes(_schema(15), 2)
    assert [len(p) for p in parts] == [8, 7]
    assert split_attributes(_schema(4), 4) == [[0], [1], [2], [3]]
    with pytest.raises(ValueError):
        split_attributes(_schema(3), 4)


def test_explicit_split_validation():
    s = _schema(4)
    assert split_attributes(s, 2, [[3, 0], [1, 2]]) == [[0, 3], [1, 2]]
    with pytest.raises(ValueError, match="overlap"):
        split_attributes(s, 2, [[0, 1], [1, 2, 3]])
    with pytest.raises(ValueError, match="cover"):
        split_attributes(s, 2, [[0], [1, 2]])
    with pytest.raises(ValueError):
        split_attributes(s, 3, [[0, 1], [2, 3]])


@pytest.fixture
def domain_file(tmp_path):
    path = tmp_path / "domain.json"
    path.write_text(json.dumps({"attributes": [
        {"name": "colour", "categories": ["red", "green", "blue"]},
        {"name": "level", "size": 4},
    ]}))
    return path


def test_load_csv_with_categories(tmp_path, domain_file):
    csv = tmp_path / "d.csv"
    csv.write_text("level,colour\n3,blue\n0,red\n")
    data = load_csv(csv, domain_file)
    assert data.schema.names == ("colour", "level")
    assert data.rows.tolist() == [[2, 3], [0, 0]]


def test_load_csv_errors(tmp_path, domain_file):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match="header"):
        load_csv(empty, domain_file)
    bad = tmp_path / "bad.csv"
    bad.write_text("colour,level\nred,9\n")
    with pytest.raises(DomainError, match="level"):
        load_csv(bad, domain_file)
    bad.write_text("colour,level\npurple,1\n")
    with pytest.raises(DomainError, match="purple"):
        load_csv(bad, domain_file)


def test_header_only_csv_is_empty(tmp_path, domain_file):
    csv = tmp_path / "h.csv"
    csv.write_text("colour,level\n")
    assert load_csv(csv, domain_file).n == 0


def test_csv_round_trip(tmp_path, domain_file):
    dom = Domain.load(domain_file)
    data = Dataset(dom.schema, [[1, 2], [0, 3]])
    write_csv(tmp_path / "out.csv", data, dom)
    assert "green" in (tmp_path / "out.csv").read_text()
    assert np.array_equal(load_csv(tmp_path / "out.csv", dom).rows, data.rows)


def test_planted_dataset_couplings():
    data = planted_dataset(20_000, rng=np.random.default_rng(0))
    agree = (data.rows[:, 1] == data.rows[:, 3]).mean()
    # copy w.p. 0.8, otherwise a uniform binary value: agreement 0.8 + 0.2 / 2
    assert agree == pytest.approx(0.9, abs=0.01)
    assert (data.rows[:, 0] == data.rows[:, 2]).mean() < 0.6
    with pytest.raises(ValueError):
        planted_dataset(10, couplings=((2, 1, 0.5),))


def test_eval_lway_tvd():
    rng = np.random.default_rng(0)
    a = random_dataset(rng, (2, 3, 2, 2), 500)
    same = eval_lway_tvd(a, a, 2, 300, rng)
    assert same.mean == 0 and same.count == 6
    b = Dataset(a.schema, np.zeros_like(a.rows))
    assert eval_lway_tvd(a, b, 1, 300, rng).mean > 0.3
    with pytest.raises(ValueError):
        eval_lway_tvd(a, a, 5)


def test_config_json_round_trip(tmp_path):
    cfg = RunConfig(m=3, assignment=[[0, 1], [2, 3], [4, 5]], eval_l=(2,))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert RunConfig.from_json(path) == cfg
    assert RunConfig.from_json(path, epsilon=0.5).epsilon == 0.5
    path.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ValueError):
        RunConfig.from_json(path)
    with pytest.raises(ValueError):
        RunConfig(encoder="xyz")


def test_runs_are_reproducible(tmp_path):
    a = run_experiment(RunConfig(output=str(tmp_path / "a"), **FAST))
    b = run_experiment(RunConfig(output=str(tmp_path / "b"), **FAST))
    assert (tmp_path / "a" / "synthetic.csv").read_bytes() == (tmp_path / "b" / "synthetic.csv").read_bytes()
    assert a["tvd"] == b["tvd"]
    for name in ("report.json", "metrics.json", "ledger.json"):
        assert (tmp_path / "a" / name).exists()


def test_binned_fo_pipeline_on_wide_domains():
    rng = np.random.default_rng(3)
    n = 3000
    x0 = rng.integers(0, 12, n)
    x3 = np.where(rng.random(n) < 0.8, x0 // 2, rng.integers(0, 6, n))
    rows = np.stack([x0, rng.integers(0, 3, n), rng.integers(0, 2, n), x3], axis=1)
    data = Dataset(Schema(("a", "b", "c", "d"), (12, 3, 2, 6)), rows)
    cfg = RunConfig(encoder="fo", epsilon=4.0, b=4, assignment=[[0, 1], [2, 3]], t=50)
    res = run_pipeline(data, cfg)
    assert res.synthetic.schema == data.schema
    eps, delta = res.ledger.total()
    assert eps == pytest.approx(4.0) and delta == pytest.approx(1 / n)
    stages = {e.stage.split(":")[0] for e in res.ledger.entries}
    assert "binning" in stages
    assert res.state.report["edges"][0]["pair"] == [0, 3]


def test_cli_synthesize_and_evaluate(tmp_path):
    runner = CliRunner()
    out = tmp_path / "run"
    res = runner.invoke(main, ["synthesize", "--planted-n", "2000", "-t", "80", "--eval-l", "2",
                               "--eval-samples", "10", "-o", str(out)])
    assert res.exit_code == 0, res.output
    assert "mean TVD" in res.output and "privacy spent" in res.output
    domain = tmp_path / "domain.json"
    domain.write_text(json.dumps({"attributes": [{"name": f"a{j}", "size": 2} for j in range(6)]}))
    res = runner.invoke(main, ["evaluate", str(out / "synthetic.csv"), str(out / "synthetic.csv"),
                               "--domain", str(domain), "--eval-l", "2"])
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)[0]["mean"] == 0


def test_cli_sweep_writes_tsv(tmp_path):
    tsv = tmp_path / "sweep.tsv"
    res = CliRunner().invoke(main, ["sweep", "--planted-n", "1500", "-t", "50", "--eval-l", "2",
                                    "--epsilons", "1,2", "--seeds", "0", "-o", str(tsv)])
    assert res.exit_code == 0, res.output
    lines = tsv.read_text().splitlines()
    assert lines[0].startswith("epsilon\tseed") and len(lines) == 3


def test_cli_rejects_bad_config(tmp_path):
    res = CliRunner().invoke(main, ["synthesize", "--encoder", "zzz", "-o", str(tmp_path)])
    assert res.exit_code != 0
