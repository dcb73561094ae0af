"""Multiply-accumulate counting and the key-frame runtime-cost model.

Primitives report their MAC counts into the active CostCounter (a
contextvar, so nothing is counted unless a counter is installed).  The
pipeline tags work with scopes naming the five function classes:

    feat   backbone feature extraction
    flow   flow + scale field estimation
    warp   bilinear warping and scale refinement
    gru    recurrent temporal encoding
    parse  parsing head (global branch + instance branch)

The per-segment cost ratio of the key-frame pipeline versus the per-frame
baseline is

    r = (GRU + (l+p) * (W + F) + l * PARSE + FEAT) / (l * (FEAT + PARSE))

with the light-term approximation

    r ~= (l+p) * F / (l * FEAT) + 1/l

where FEAT, F, W, PARSE are per-call costs and GRU is the cost of one
full temporal encoding (p+1 recurrent steps).
"""

from __future__ import annotations

import contextlib
import contextvars
import json
from dataclasses import dataclass, field

from .errors import ContractViolation

FUNCTION_CLASSES = ("feat", "flow", "warp", "gru", "parse", "other")

_active_counter: contextvars.ContextVar = contextvars.ContextVar(
    "flowparse_cost_counter", default=None
)


class CostCounter:
    """Accumulates MACs and call counts per function class."""

    def __init__(self):
        self.macs = {c: 0 for c in FUNCTION_CLASSES}
        self.calls = {c: 0 for c in FUNCTION_CLASSES}
        self._scope = "other"

    @contextlib.contextmanager
    def scope(self, name: str):
        if name not in FUNCTION_CLASSES:
            raise ContractViolation(f"unknown cost scope {name!r}")
        prev = self._scope
        self._scope = name
        self.calls[name] += 1
        try:
            yield self
        finally:
            self._scope = prev

    def add(self, macs: int) -> None:
        self.macs[self._scope] += int(macs)

    def total(self) -> int:
        return sum(self.macs.values())


@contextlib.contextmanager
def counting(counter: CostCounter):
    """Install `counter` as the active MAC sink for the enclosed block."""
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


@contextlib.contextmanager
def scope(name: str):
    """Tag the enclosed work with a function class on the active counter.

    No-op when nothing is counting, so instrumented modules stay free of
    overhead during normal runs.
    """
    counter = _active_counter.get()
    if counter is None:
        yield None
    else:
        with counter.scope(name):
            yield counter


def add_macs(n: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(n)


@dataclass
class CostReport:
    """Instrumented MAC totals plus the model's predicted ratios.

    `unit_costs` holds per-call costs for feat/flow/warp/parse and the
    per-encoding cost for gru; `measured_r` is pipeline total over
    baseline total from actual instrumented runs.
    """

    counts: dict = field(default_factory=dict)
    calls: dict = field(default_factory=dict)
    unit_costs: dict = field(default_factory=dict)
    r_exact: float = 0.0
    r_approx: float = 0.0
    measured_r: float = 0.0
    wall_ms: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "counts": {k: int(v) for k, v in self.counts.items()},
            "calls": {k: int(v) for k, v in self.calls.items()},
            "unit_costs": {k: float(v) for k, v in self.unit_costs.items()},
            "r_exact": self.r_exact,
            "r_approx": self.r_approx,
            "measured_r": self.measured_r,
            "wall_ms": self.wall_ms,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def exact_ratio(unit_costs: dict, segment_length: int, encoding_range: int) -> float:
    """Per-segment cost ratio versus the per-frame baseline (exact form)."""
    l, p = segment_length, encoding_range
    feat = unit_costs["feat"]
    parse = unit_costs["parse"]
    denom = l * (feat + parse)
    if denom <= 0:
        raise ContractViolation("baseline cost must be positive")
    num = (
        unit_costs["gru"]
        + (l + p) * (unit_costs["warp"] + unit_costs["flow"])
        + l * parse
        + feat
    )
    return num / denom


def approx_ratio(unit_costs: dict, segment_length: int, encoding_range: int) -> float:
    """Light-term approximation: (l+p)*F / (l*FEAT) + 1/l."""
    l, p = segment_length, encoding_range
    feat = unit_costs["feat"]
    if l * feat <= 0:
        raise ContractViolation("baseline cost must be positive")
    return (l + p) * unit_costs["flow"] / (l * feat) + 1.0 / l
