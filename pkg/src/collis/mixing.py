"""Scene-level point-cloud mixing: LaserMix, PolarMix and sub-cloud shuffling.

Mixing only moves points between clouds; coordinates, intensity and labels of
every surviving point are copied unchanged. Each output point carries an
origin tag (0 = first cloud, 1 = second cloud) and its index in that cloud.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import ORIGIN_A, ORIGIN_B, PointCloud

TWO_PI = 2 * np.pi


class Strategy(enum.Enum):
    NONE = "none"
    LASER_MIX = "lasermix"
    POLAR_MIX = "polarmix"
    SUB_CLOUD_SHUFFLE = "subcloud_shuffle"


MIX_STRATEGIES = (Strategy.LASER_MIX, Strategy.POLAR_MIX, Strategy.SUB_CLOUD_SHUFFLE)


@dataclass(frozen=True, eq=False)
class MixOutcome:
    """Result of one mixing draw.

    When mixed, ``cloud`` holds the mixed points with origin tags and
    ``source_index`` maps each point back into its source cloud. When not
    mixed, ``pair`` holds the two input clouds untouched and ``cloud`` is None.
    """

    strategy: Strategy
    cloud: PointCloud | None = None
    source_index: np.ndarray | None = None
    pair: tuple[PointCloud, PointCloud] | None = None

    @property
    def was_mixed(self) -> bool:
        return self.strategy is not Strategy.NONE

    def parts(self) -> list[tuple[PointCloud, np.ndarray, np.ndarray]]:
        """(cloud, origin tags, source index) for each cloud to run through a model."""
        if self.was_mixed:
            return [(self.cloud, self.cloud.origin, self.source_index)]
        out = []
        for tag, c in zip((ORIGIN_A, ORIGIN_B), self.pair):
            if c is not None:
                out.append((c, np.full(c.n, tag, np.uint8), np.arange(c.n)))
        return out


def _combine(a: PointCloud, ia: np.ndarray, b: PointCloud, ib: np.ndarray, strategy, order=None):
    points = np.concatenate([a.points[ia], b.points[ib]])
    origin = np.concatenate([np.full(len(ia), ORIGIN_A, np.uint8), np.full(len(ib), ORIGIN_B, np.uint8)])
    source = np.concatenate([ia, ib]).astype(np.int64)
    labels = None
    if a.labels is not None and b.labels is not None:
        labels = np.concatenate([a.labels[ia], b.labels[ib]])
    if order is not None:
        points, origin, source = points[order], origin[order], source[order]
        labels = None if labels is None else labels[order]
    k = a.num_classes if a.num_classes is not None else b.num_classes
    cloud = PointCloud(points, labels, origin, k)
    source.flags.writeable = False
    return MixOutcome(strategy, cloud, source)


def elevation_deg(cloud: PointCloud) -> np.ndarray:
    xyz = cloud.xyz.astype(np.float64)
    return np.degrees(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])))


def azimuth(cloud: PointCloud) -> np.ndarray:
    """Azimuth in [0, 2*pi)."""
    xyz = cloud.xyz.astype(np.float64)
    return np.mod(np.arctan2(xyz[:, 1], xyz[:, 0]), TWO_PI)


def elevation_band(theta_deg: np.ndarray, partitions: int, fov_up: float, fov_down: float) -> np.ndarray:
    band = np.floor((theta_deg - fov_down) / (fov_up - fov_down) * partitions)
    return np.clip(band, 0, partitions - 1).astype(np.int64)


def laser_mix(
    a: PointCloud,
    b: PointCloud,
    partitions: int,
    seed=None,
    fov_up: float = 3.0,
    fov_down: float = -25.0,
    swap: bool | None = None,
) -> MixOutcome:
    """Interleave equal elevation bands of two scenes.

    Even bands (counted from fov_down) keep `a`'s points and odd bands keep
    `b`'s, or the reverse when the random swap bit is set.
    """
    if partitions < 2:
        raise ValueError(f"LaserMix needs at least 2 partitions, got {partitions}")
    if a.n == 0 or b.n == 0:
        raise ValueError("LaserMix needs two non-empty clouds")
    if swap is None:
        swap = bool(np.random.default_rng(seed).integers(2))
    parity = 1 if swap else 0
    band_a = elevation_band(elevation_deg(a), partitions, fov_up, fov_down)
    band_b = elevation_band(elevation_deg(b), partitions, fov_up, fov_down)
    ia = np.flatnonzero(band_a % 2 == parity)
    ib = np.flatnonzero(band_b % 2 != parity)
    return _combine(a, ia, b, ib, Strategy.LASER_MIX)


def in_sector(phi: np.ndarray, start: float, width: float) -> np.ndarray:
    return np.mod(phi - start, TWO_PI) < width


def polar_mix(a: PointCloud, b: PointCloud, start: float, width: float) -> MixOutcome:
    """Replace `a`'s azimuth sector [start, start + width) with `b`'s (wrapping mod 2*pi)."""
    if not 0.0 < width < TWO_PI:
        raise ValueError(f"sector width must be in (0, 2*pi), got {width}")
    ia = np.flatnonzero(~in_sector(azimuth(a), start, width))
    ib = np.flatnonzero(in_sector(azimuth(b), start, width))
    return _combine(a, ia, b, ib, Strategy.POLAR_MIX)


def sub_cloud_shuffle(a: PointCloud, b: PointCloud, seed=None) -> MixOutcome:
    """Random halves of both clouds (ceil(N/2) points each), randomly interleaved."""
    if a.n == 0 or b.n == 0:
        raise ValueError("sub-cloud shuffle needs two non-empty clouds")
    rng = np.random.default_rng(seed)
    ia = np.sort(rng.permutation(a.n)[: math.ceil(a.n / 2)])
    ib = np.sort(rng.permutation(b.n)[: math.ceil(b.n / 2)])
    order = rng.permutation(len(ia) + len(ib))
    return _combine(a, ia, b, ib, Strategy.SUB_CLOUD_SHUFFLE, order)


def maybe_mix(
    labeled: PointCloud,
    unlabeled: PointCloud | None,
    q_m: float,
    rng: np.random.Generator,
    fov_up: float = 3.0,
    fov_down: float = -25.0,
) -> MixOutcome:
    """With probability q_m apply one uniformly chosen strategy, else pass both through.

    The labeled cloud is always the first (origin 0) argument of the mix.
    Exactly one uniform draw is consumed when nothing is mixed.
    """
    if not 0.0 <= q_m <= 1.0:
        raise ValueError(f"q_m must be a probability, got {q_m}")
    if unlabeled is None:
        return MixOutcome(Strategy.NONE, pair=(labeled, None))
    if rng.random() >= q_m or labeled.n == 0 or unlabeled.n == 0:
        return MixOutcome(Strategy.NONE, pair=(labeled, unlabeled))
    strategy = MIX_STRATEGIES[int(rng.integers(3))]
    if strategy is Strategy.LASER_MIX:
        partitions = int(rng.integers(2, 5))
        return laser_mix(labeled, unlabeled, partitions, fov_up=fov_up, fov_down=fov_down,
                         swap=bool(rng.integers(2)))
    if strategy is Strategy.POLAR_MIX:
        start = rng.uniform(0, TWO_PI)
        width = rng.uniform(np.pi / 4, np.pi)
        return polar_mix(labeled, unlabeled, start, width)
    return sub_cloud_shuffle(labeled, unlabeled, seed=rng.integers(2**63))
