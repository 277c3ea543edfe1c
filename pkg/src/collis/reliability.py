"""Pseudo-label reliability: epoch trust, pairwise confidence dominance,
adaptive thresholds, filtering and distillation weights.

Dominance counts are integers, so the pairwise ratios and the distillation
weights are kept as exact fractions; floats are only produced where a value
enters the loss arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def absolute_reliability(epoch: int, max_epochs: int, lambda0: float) -> tuple[float, float]:
    """Epoch-linear trust beta and the matching unlabeled-loss weight."""
    if max_epochs < 1:
        raise ValueError("max_epochs must be >= 1")
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    beta = epoch / max_epochs
    return beta, lambda0 * (1.0 - beta) + beta


def dominance_counts(confidences, smoothing: int = 1) -> np.ndarray:
    """N[i, j] = number of points where student i is strictly more confident than j, plus `smoothing`.

    The diagonal is left at zero.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.ndim != 2 or len(conf) < 2:
        raise ValueError("need an (S >= 2, M) array of confidences")
    s = len(conf)
    counts = np.zeros((s, s), dtype=np.int64)
    for i in range(s):
        for j in range(s):
            if i != j:
                counts[i, j] = np.count_nonzero(conf[i] > conf[j]) + smoothing
    return counts


def relative_reliability(counts) -> list[list[Fraction]]:
    """gamma[i][j] = N[i][j] / N[j][i] as exact fractions (diagonal = 1)."""
    counts = np.asarray(counts)
    s = len(counts)
    gamma = [[Fraction(1) for _ in range(s)] for _ in range(s)]
    for i in range(s):
        for j in range(s):
            if i != j:
                if counts[j, i] <= 0 or counts[i, j] <= 0:
                    raise ZeroDivisionError("dominance counts must be positive; use smoothing")
                gamma[i][j] = Fraction(int(counts[i, j]), int(counts[j, i]))
    return gamma


def threshold(delta0: float, beta: float, gamma) -> float:
    """min(delta0, delta0 * (1 - beta) / gamma)."""
    return min(delta0, delta0 * (1.0 - beta) / float(gamma))


def filter_pseudo_labels(output, delta: float, eligible) -> tuple[np.ndarray, np.ndarray]:
    """Keep the source's argmax where its confidence strictly exceeds `delta`.

    `output` needs ``confidence`` and ``predictions`` arrays. Labels outside
    the retained mask are set to 0 and must not be read.
    """
    eligible = np.asarray(eligible, dtype=bool)
    mask = eligible & (output.confidence > delta)
    labels = np.where(mask, output.predictions, 0)
    return labels, mask


def distillation_weights(counts, target: int, sources) -> dict[int, Fraction]:
    """Per-source weight proportional to its dominance count over the other sources.

    With two sources i, j this is N[i][j] / (N[i][j] + N[j][i]); with one it is 1.
    The target's own counts never enter.
    """
    counts = np.asarray(counts)
    sources = [int(s) for s in sources]
    if target in sources:
        raise ValueError("a student is not its own pseudo-label source")
    if not sources:
        return {}
    if len(sources) == 1:
        return {sources[0]: Fraction(1)}
    raw = {i: sum(int(counts[i, j]) for j in sources if j != i) for i in sources}
    total = sum(raw.values())
    if total <= 0:
        return {i: Fraction(1, len(sources)) for i in sources}
    return {i: Fraction(v, total) for i, v in raw.items()}


@dataclass
class ReliabilityState:
    beta: float
    lambda_u: float
    counts: np.ndarray
    gamma: list[list[Fraction]]
    delta: dict[tuple[int, int], float] = field(default_factory=dict)
    omega: dict[tuple[int, int], Fraction] = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {
            "beta": self.beta,
            "lambda_u": self.lambda_u,
            "counts": self.counts.tolist(),
            "gamma": [[float(g) for g in row] for row in self.gamma],
            "delta": {f"{i}->{j}": d for (i, j), d in sorted(self.delta.items())},
            "omega": {f"{i}->{j}": float(w) for (i, j), w in sorted(self.omega.items())},
        }


def reliability_state(
    confidences,
    beta: float,
    lambda_u: float,
    delta0: float,
    naive: bool = False,
    force_delta: float | None = None,
) -> ReliabilityState:
    """Thresholds and weights for every ordered (source, target) pair.

    In naive mode every pair uses delta0, gamma is 1 and weights are uniform.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    s = len(conf)
    counts = dominance_counts(conf)
    gamma = relative_reliability(counts)
    if naive:
        gamma = [[Fraction(1)] * s for _ in range(s)]
    state = ReliabilityState(beta, lambda_u, counts, gamma)
    for t in range(s):
        sources = [i for i in range(s) if i != t]
        if naive:
            w = {i: Fraction(1, len(sources)) for i in sources}
        else:
            w = distillation_weights(counts, t, sources)
        for i in sources:
            if force_delta is not None:
                d = force_delta
            elif naive:
                d = delta0
            else:
                d = threshold(delta0, beta, gamma[i][t])
            state.delta[(i, t)] = d
            state.omega[(i, t)] = w[i]
    return state
