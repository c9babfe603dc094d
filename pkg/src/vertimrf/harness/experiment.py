"""End-to-end orchestration: parties, message boundary, server, evaluation.

This is the only place that holds both party capabilities (data slices, the
key oracle) and the server; only serialized messages cross between them.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Dataset, concat_columns
from ..fo import loc_enc_fo
from ..keys import KeyOracle
from ..mrf import sample
from ..party import bin_attributes, build_party_message, loc_mrf, local_clique_bound, value_distributions
from ..privacy import BudgetPlan, PrivacyBudget, SpendLedger, grr_composed, grr_epsilon_for_budget, sanitize_count
from ..server import ServerConfig, ServerState, receive, run_server, synthesize
from ..sketch import loc_enc_sketch
from ..wire import encode_message, size_report
from .config import RunConfig
from .data import DEFAULT_SPLIT, Domain, load_csv, planted_dataset, split_attributes, write_csv
from .metrics import eval_lway_tvd

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    synthetic: Dataset
    ledger: SpendLedger
    state: ServerState
    payloads: list[bytes]
    timing: dict = field(default_factory=dict)

    @property
    def message_sizes(self) -> list[dict]:
        return [size_report(p).to_json() for p in self.payloads]


def load_input(cfg: RunConfig) -> tuple[Dataset, Domain]:
    if cfg.input is None:
        data = planted_dataset(cfg.planted_n, rng=np.random.default_rng(cfg.data_seed))
        return data, Domain.plain(data.schema)
    if cfg.domain is None:
        raise ValueError("an input CSV needs a domain file")
    domain = Domain.load(cfg.domain)
    return load_csv(cfg.input, domain), domain


def resolve_assignment(cfg: RunConfig, data: Dataset) -> list[list[int]]:
    if cfg.assignment == "planted":
        if cfg.m != 2:
            raise ValueError("the planted split is for two parties")
        return split_attributes(data.schema, 2, DEFAULT_SPLIT)
    return split_attributes(data.schema, cfg.m, cfg.assignment)


def run_parties(data: Dataset, parts: list[list[int]], cfg: RunConfig,
                seeds: np.random.SeedSequence) -> tuple[list[bytes], SpendLedger]:
    """Run every party's local pipeline and return the serialized messages."""
    schema, d, n = data.schema, data.schema.d, data.n
    m = len(parts)
    delta = cfg.delta if cfg.delta is not None else 1.0 / max(n, 2)
    total = PrivacyBudget(cfg.epsilon, delta)
    plan = BudgetPlan.named(cfg.plan)
    binned = [j for j in range(d) if cfg.b is not None and schema.sizes[j] > cfg.b]
    stages = plan.allocate(total, m, binning_active=bool(binned))
    if cfg.encoder == "fo":
        enc = stages.loc_enc
        if grr_composed(grr_epsilon_for_budget(enc.epsilon, enc.delta, d), d, enc.delta)[1] == 0:
            stages = plan.allocate(total, m, binning_active=bool(binned), enc_uses_delta=False)
    ledger = SpendLedger(total)
    eps_bin = stages.binning.epsilon / len(binned) if binned and stages.binning else None
    tau_prime = local_clique_bound(cfg.tau, m, schema)

    key_seed, *party_seeds = seeds.spawn(m + 1)
    ring = KeyOracle(int(key_seed.generate_state(1)[0]), cfg.t).ring() if cfg.encoder == "fm" else None

    payloads = []
    for i, (attrs, ps) in enumerate(zip(parts, party_seeds)):
        rng = np.random.default_rng(ps)
        tag = str(i)
        local = data.project(attrs)
        model = loc_mrf(local, tau_prime, stages.loc_mrf_per_party(), rng, ledger=ledger, party=tag)
        coded, maps = bin_attributes(local, cfg.b)
        spec = value_distributions(local, maps, eps_bin, rng, attributes=attrs, ledger=ledger, party=tag)
        n_hat = sanitize_count(n, stages.noisy_count.epsilon, rng, ledger) if i == 0 else None
        if cfg.encoder == "fm":
            encoding = loc_enc_sketch(coded, attrs, stages.loc_enc, cfg.gamma, cfg.t, ring, rng,
                                      d_global=d, ledger=ledger, party=tag)
        else:
            encoding = loc_enc_fo(coded, attrs, stages.loc_enc, rng, d_global=d, ledger=ledger, party=tag)
        msg = build_party_message(i, attrs, local.schema, model, encoding, spec, n_hat, ledger=ledger)
        payloads.append(encode_message(msg))
    return payloads, ledger


def server_config(cfg: RunConfig) -> ServerConfig:
    return ServerConfig(tau=cfg.tau, d_c=cfg.d_c, rounds=cfg.rounds, batch=cfg.batch,
                        error_threshold=cfg.error_threshold)


def run_pipeline(data: Dataset, cfg: RunConfig, parts: list[list[int]] | None = None) -> PipelineResult:
    parts = parts if parts is not None else resolve_assignment(cfg, data)
    party_seed, server_seed, synth_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    t0 = time.perf_counter()
    payloads, ledger = run_parties(data, parts, cfg, party_seed)
    t1 = time.perf_counter()
    state = run_server(payloads, server_config(cfg), np.random.default_rng(server_seed))
    synthetic = synthesize(state.model, state.n_hat, np.random.default_rng(synth_seed))
    t2 = time.perf_counter()
    return PipelineResult(synthetic, ledger, state, payloads,
                          {"parties_s": t1 - t0, "server_s": t2 - t1})


def independent_baseline(payloads: list[bytes], seed: int = 0) -> Dataset:
    """Each party samples its own local model; columns are joined with no cross-party structure."""
    messages = receive(payloads)
    n_hat = next(m.n_hat for m in messages if m.n_hat is not None)
    count = int(round(max(n_hat, 0.0)))
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(messages))]
    pieces, order = [], []
    for msg, rng in zip(messages, rngs):
        pieces.append(sample(msg.model, count, rng))
        order.extend(msg.attributes)
    joined = concat_columns(pieces)
    return joined.project(list(np.argsort(order)))


def evaluate(real: Dataset, synth: Dataset, ls, samples: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    return [eval_lway_tvd(real, synth, l, samples, rng).to_json() for l in ls if l <= real.schema.d]


def run_experiment(cfg: RunConfig) -> dict:
    """Full run; writes outputs when ``cfg.output`` is set and returns the metrics."""
    data, domain = load_input(cfg)
    result = run_pipeline(data, cfg)
    tvds = evaluate(data, result.synthetic, cfg.eval_l, cfg.eval_samples, cfg.seed)
    eps, delta = result.ledger.total()
    metrics = {
        "tvd": tvds,
        "ledger": result.ledger.to_json(),
        "ledger_total": {"epsilon": eps, "delta": delta},
        "timing": result.timing,
        "message_sizes": result.message_sizes,
        "n": data.n,
        "synthetic_rows": result.synthetic.n,
    }
    if cfg.output:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "synthetic.csv", result.synthetic, domain)
        report = {"config": cfg.to_json(), **result.state.report}
        (out / "report.json").write_text(json.dumps(report, indent=2))
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
        (out / "ledger.json").write_text(json.dumps(result.ledger.to_json(), indent=2))
    return metrics


def sweep(cfg: RunConfig, epsilons, seeds, out_tsv: str | Path | None = None) -> list[dict]:
    """Mean l-way TVD per (epsilon, seed); optionally written as a plot-ready TSV."""
    data, _ = load_input(cfg)
    rows = []
    for eps in epsilons:
        for s in seeds:
            run = cfg.with_(epsilon=float(eps), seed=int(s), output=None)
            result = run_pipeline(data, run)
            for summary in evaluate(data, result.synthetic, cfg.eval_l, cfg.eval_samples, int(s)):
                rows.append({"epsilon": float(eps), "seed": int(s), **summary})
    if out_tsv is not None:
        with open(out_tsv, "w") as fh:
            fh.write("epsilon\tseed\tl\tmean_tvd\tstd_tvd\tcount\n")
            for r in rows:
                fh.write(f"{r['epsilon']}\t{r['seed']}\t{r['l']}\t{r['mean']:.6f}\t{r['std']:.6f}\t{r['count']}\n")
    return rows
