"""Command line: ``vertimrf synthesize | evaluate | sweep``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from ..privacy import BudgetExceeded
from .config import RunConfig
from .data import Domain, load_csv
from .experiment import evaluate as evaluate_tvd
from .experiment import run_experiment, sweep

EXIT_OVERSPEND = 3


def _config(config_file, **flags) -> RunConfig:
    flags = {k: v for k, v in flags.items() if v is not None}
    if "assignment" in flags and flags["assignment"] not in ("uniform", "planted"):
        flags["assignment"] = json.loads(flags["assignment"])
    if "eval_l" in flags:
        flags["eval_l"] = tuple(int(x) for x in flags["eval_l"].split(","))
    if config_file:
        return RunConfig.from_json(config_file, **flags)
    return RunConfig(**flags)


def run_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True), help="JSON RunConfig file."),
        click.option("--input", type=click.Path(exists=True), help="CSV input; planted data when omitted."),
        click.option("--domain", type=click.Path(exists=True), help="JSON domain file for --input."),
        click.option("-m", "--parties", "m", type=int, help="Number of parties."),
        click.option("--assignment", help='"uniform", "planted" or a JSON list of index lists.'),
        click.option("--encoder", type=click.Choice(["fm", "fo"])),
        click.option("--epsilon", type=float),
        click.option("--delta", type=float, help="Defaults to 1/n."),
        click.option("--plan", type=click.Choice(["default", "half-split"])),
        click.option("-t", "--repeats", "t", type=int, help="Sketch repeats."),
        click.option("--gamma", type=float),
        click.option("-b", "--bins", "b", type=int),
        click.option("--tau", type=float),
        click.option("--d-c", "d_c", type=float),
        click.option("--rounds", type=int),
        click.option("--seed", type=int),
        click.option("--data-seed", type=int),
        click.option("--planted-n", type=int),
        click.option("--eval-l", help="Comma-separated marginal sizes, e.g. 3,4,5."),
        click.option("--eval-samples", type=int),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Private synthetic data over vertically partitioned tables."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@run_options
@click.option("-o", "--output", type=click.Path(), required=True, help="Output directory.")
def synthesize(config_file, **flags):
    """Run the full pipeline and write synthetic.csv, report.json, metrics.json, ledger.json."""
    cfg = _config(config_file, **flags)
    try:
        metrics = run_experiment(cfg)
    except BudgetExceeded as exc:
        click.echo(f"privacy budget exceeded: {exc}", err=True)
        sys.exit(EXIT_OVERSPEND)
    for row in metrics["tvd"]:
        click.echo(f"l={row['l']}  mean TVD {row['mean']:.4f}  (std {row['std']:.4f}, {row['count']} marginals)")
    total = metrics["ledger_total"]
    click.echo(f"privacy spent: epsilon={total['epsilon']:.6g} delta={total['delta']:.3g}")


@main.command()
@click.argument("real", type=click.Path(exists=True))
@click.argument("synthetic", type=click.Path(exists=True))
@click.option("--domain", type=click.Path(exists=True), required=True)
@click.option("--eval-l", default="3,4,5")
@click.option("--eval-samples", type=int, default=300)
@click.option("--seed", type=int, default=0)
def evaluate(real, synthetic, domain, eval_l, eval_samples, seed):
    """Mean l-way TVD between two CSV files over the same domain."""
    dom = Domain.load(domain)
    a, b = load_csv(real, dom), load_csv(synthetic, dom)
    ls = [int(x) for x in eval_l.split(",")]
    rows = evaluate_tvd(a, b, ls, eval_samples, seed)
    click.echo(json.dumps(rows, indent=2))


@main.command(name="sweep")
@run_options
@click.option("--epsilons", default="0.4,0.8,1.6,3.2")
@click.option("--seeds", "seed_list", default="0,1,2,3,4")
@click.option("-o", "--output", type=click.Path(), required=True, help="TSV file for (epsilon, TVD) rows.")
def sweep_cmd(config_file, epsilons, seed_list, output, **flags):
    """TVD against epsilon over several seeds, written as a plot-ready TSV."""
    flags.pop("seed", None)
    cfg = _config(config_file, **flags)
    eps = [float(x) for x in epsilons.split(",")]
    seeds = [int(x) for x in seed_list.split(",")]
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    try:
        rows = sweep(cfg, eps, seeds, output)
    except BudgetExceeded as exc:
        click.echo(f"privacy budget exceeded: {exc}", err=True)
        sys.exit(EXIT_OVERSPEND)
    for e in eps:
        vals = [r["mean"] for r in rows if r["epsilon"] == e]
        click.echo(f"epsilon={e:g}  mean TVD {sum(vals) / len(vals):.4f}")


if __name__ == "__main__":
    main()
