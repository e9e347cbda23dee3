"""Analytic FLOP accounting.

Counts follow a fixed convention so numbers are comparable across machines:
a linear map with an ``m x n`` weight costs ``2 m n`` per application,
attention costs ``2 Nq Nk h`` for the scores plus the same for the weighted
sum, and a backward pass costs twice the forward pass it differentiates.
Validation passes are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field


def phase_flops(marginal_fwd, copula_fwd, phase):
    """``(forward, backward)`` FLOPs of one training step in ``phase``."""
    if phase == "stage1":
        # the copula path is never evaluated
        return marginal_fwd, 2 * marginal_fwd
    if phase == "stage2":
        # frozen marginals run forward only to produce the PIT values
        return marginal_fwd + copula_fwd, 2 * copula_fwd
    if phase == "joint":
        fwd = marginal_fwd + copula_fwd
        return fwd, 2 * fwd
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class FlopLedger:
    forward: dict = field(default_factory=dict)
    backward: dict = field(default_factory=dict)

    def add(self, stage, forward, backward):
        if forward < 0 or backward < 0:
            raise ValueError("FLOP counts must be non-negative")
        self.forward[stage] = self.forward.get(stage, 0) + int(forward)
        self.backward[stage] = self.backward.get(stage, 0) + int(backward)

    def stage_total(self, stage):
        return self.forward.get(stage, 0) + self.backward.get(stage, 0)

    @property
    def total(self):
        return sum(self.forward.values()) + sum(self.backward.values())

    def to_dict(self):
        stages = sorted(set(self.forward) | set(self.backward))
        return {
            "schema": "flop-ledger/1",
            "stages": {s: {"forward": self.forward.get(s, 0), "backward": self.backward.get(s, 0)} for s in stages},
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d):
        ledger = cls()
        for s, v in d["stages"].items():
            ledger.add(s, v["forward"], v["backward"])
        return ledger
