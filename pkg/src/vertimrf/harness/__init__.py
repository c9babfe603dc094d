"""Experiment harness: configuration, data loading, orchestration and metrics."""

from .config import RunConfig
from .data import Domain, load_csv, planted_dataset, split_attributes, write_csv
from .experiment import independent_baseline, run_experiment, run_pipeline, sweep
from .metrics import TVDSummary, eval_lway_tvd

__all__ = [
    "Domain",
    "RunConfig",
    "TVDSummary",
    "eval_lway_tvd",
    "independent_baseline",
    "load_csv",
    "planted_dataset",
    "run_experiment",
    "run_pipeline",
    "split_attributes",
    "sweep",
    "write_csv",
]
