"""Run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from ..privacy import BudgetPlan


@dataclass(frozen=True)
class RunConfig:
    """Every knob of one end-to-end run.

    Without ``input`` the built-in planted dataset is generated from
    ``planted_n`` and ``data_seed``.  ``delta=None`` means 1/n.
    """

    input: str | None = None
    domain: str | None = None
    m: int = 2
    assignment: Any = "uniform"
    encoder: str = "fm"
    epsilon: float = 2.0
    delta: float | None = None
    plan: str = "default"
    t: int = 2000
    gamma: float = 0.1
    b: int | None = None
    tau: float = 1e5
    d_c: float = 50.0
    rounds: int = 10
    batch: int = 8
    error_threshold: float = 0.1
    seed: int = 0
    data_seed: int = 0
    planted_n: int = 20000
    eval_l: tuple[int, ...] = (3, 4, 5)
    eval_samples: int = 300
    output: str | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.encoder not in ("fm", "fo"):
            raise ValueError(f"encoder must be 'fm' or 'fo', got {self.encoder!r}")
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.b is not None and self.b < 1:
            raise ValueError("b must be at least 1")
        BudgetPlan.named(self.plan)
        if not isinstance(self.assignment, str):
            object.__setattr__(self, "assignment", tuple(tuple(int(a) for a in p) for p in self.assignment))
        object.__setattr__(self, "eval_l", tuple(int(x) for x in self.eval_l))

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        out = asdict(self)
        if not isinstance(self.assignment, str):
            out["assignment"] = [list(p) for p in self.assignment]
        out["eval_l"] = list(self.eval_l)
        return out
