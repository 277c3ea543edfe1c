"""Mixing-probability control: constant, curriculum ramp, or consensus-driven.

The consensus-driven controller buffers the inter-student agreement of every
batch and, every ``step_size`` batches, rescales q_m by one plus the summed
signed agreements (agreement on an unmixed batch pushes q_m up, disagreement
on a mixed batch pulls it down).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

MODES = ("constant", "curriculum", "consensus")
Q_FLOOR = 0.01
Q_CEIL = 1.0


def consensus_fraction(predictions) -> float:
    """Fraction of (unordered student pair, point) combinations that agree."""
    preds = [np.asarray(p) for p in predictions]
    if len(preds) < 2:
        raise ValueError("consensus needs at least two students")
    m = len(preds[0])
    if m < 1 or any(len(p) != m for p in preds):
        raise ValueError("predictions must be non-empty and of equal length")
    agree = sum(int(np.count_nonzero(p == q)) for p, q in combinations(preds, 2))
    pairs = len(preds) * (len(preds) - 1) // 2
    return agree / (pairs * m)


def transform(a: float, was_mixed: bool) -> float:
    return a - 1.0 if was_mixed else a


def curriculum_q(epoch: int, max_epochs: int, q_min: float, q_max: float) -> float:
    if max_epochs <= 0:
        raise ValueError("curriculum needs max_epochs >= 1")
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return q_min + (epoch / max_epochs) * (q_max - q_min)


@dataclass
class CdaController:
    mode: str = "consensus"
    q_m: float = 0.25
    step_size: int = 50
    q_min: float = 0.2
    q_max: float = 0.3
    buffer: list[tuple[float, bool]] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown CDA mode {self.mode!r}")
        if self.step_size < 1:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.q_m <= 1.0:
            raise ValueError("q_m must be a probability")

    def observe(self, a: float, was_mixed: bool) -> float:
        """Record one batch; returns the (possibly updated) q_m."""
        if self.mode != "consensus":
            return self.q_m
        self.buffer.append((a, was_mixed))
        if len(self.buffer) >= self.step_size:
            total = sum(transform(x, m) for x, m in self.buffer)
            self.q_m = min(max(self.q_m * (1.0 + total), Q_FLOOR), Q_CEIL)
            self.buffer.clear()
            self.history.append(self.q_m)
        return self.q_m

    def start_epoch(self, epoch: int, max_epochs: int) -> float:
        if self.mode == "curriculum":
            self.q_m = curriculum_q(epoch, max_epochs, self.q_min, self.q_max)
            self.history.append(self.q_m)
        return self.q_m
