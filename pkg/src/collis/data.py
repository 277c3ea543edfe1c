"""Point-cloud containers, synthetic beam-scanned scenes, dataset splits and file I/O."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ORIGIN_A = 0  # labeled-source / first cloud of a mix
ORIGIN_B = 1  # unlabeled-source / second cloud of a mix

GROUND, VEHICLE, POLE, VEGETATION = 0, 1, 2, 3

_MAGIC = b"PCLS"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHB")
_FLAG_LABELS = 0x01
_FLAG_ORIGIN = 0x02


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class CloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points of (x, y, z, intensity) with optional labels and origin tags.

    Arrays are made read-only on construction so a cloud can be shared freely.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    origin: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if pts.size and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != n:
                raise ValueError(f"labels length {len(labels)} != N={n}")
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            if self.num_classes is not None and labels.size and labels.max() >= self.num_classes:
                raise ValueError(f"label {labels.max()} >= K={self.num_classes}")
            object.__setattr__(self, "labels", _frozen(labels))
        if self.origin is not None:
            origin = np.array(self.origin, dtype=np.uint8).reshape(-1)
            if len(origin) != n:
                raise ValueError(f"origin length {len(origin)} != N={n}")
            if origin.size and origin.max() > ORIGIN_B:
                raise ValueError("origin tags must be 0 (A) or 1 (B)")
            object.__setattr__(self, "origin", _frozen(origin))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def without_labels(self) -> PointCloud:
        return replace(self, labels=None)

    def subset(self, index: np.ndarray) -> PointCloud:
        index = np.asarray(index)
        return PointCloud(
            self.points[index],
            None if self.labels is None else self.labels[index],
            None if self.origin is None else self.origin[index],
            self.num_classes,
        )

    def equals(self, other: PointCloud) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and np.array_equal(a, b)

        return (
            self.num_classes == other.num_classes
            and self.points.tobytes() == other.points.tobytes()
            and same(self.labels, other.labels)
            and same(self.origin, other.origin)
        )


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ConfigError("a class map needs at least 2 classes")
        if len(self.weights) != len(self.names):
            raise ConfigError("one generation weight per class is required")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"class weights must sum to 1, got {sum(self.weights)!r}")

    @property
    def k(self) -> int:
        return len(self.names)

    @classmethod
    def default(cls) -> ClassMap:
        return cls(("ground", "vehicle", "pole", "vegetation"), (0.55, 0.2, 0.05, 0.2))

    def long_tail(self, cls_index: int = POLE, factor: float = 0.2) -> ClassMap:
        """Shrink one class's weight by `factor` and renormalize."""
        w = list(self.weights)
        w[cls_index] *= factor
        total = sum(w)
        w = [x / total for x in w]
        w[-1] = 1.0 - sum(w[:-1])
        return ClassMap(self.names, tuple(w))


@dataclass(frozen=True)
class SceneConfig:
    """Layout of one synthetic scene and of the scanning sensor.

    Object counts are the means of per-scene Poisson draws; each mean is
    scaled by the class weight relative to the default class map, which is
    how the long-tail option thins out a class.
    """

    rows: int = 16
    cols: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    sensor_height: float = 1.7
    ground_radius: float = 24.0
    vehicles: float = 4.0
    poles: float = 5.0
    vegetation: float = 4.0
    classes: ClassMap = field(default_factory=ClassMap.default)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("scene needs at least one ray (rows, cols >= 1)")
        if self.classes.k < 1:
            raise ConfigError("scene needs at least one class")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")
        if self.sensor_height <= 0 or self.ground_radius <= 0:
            raise ConfigError("sensor height and ground radius must be positive")
        if min(self.vehicles, self.poles, self.vegetation) < 0:
            raise ConfigError("object counts must be non-negative")

    def ray_directions(self, phase: float = 0.0) -> np.ndarray:
        """Unit ray directions, row-major over (elevation row, azimuth column)."""
        step = (self.fov_up - self.fov_down) / self.rows
        elev = np.radians(self.fov_up - (np.arange(self.rows) + 0.5) * step)
        azim = -np.pi + (np.arange(self.cols) + 0.5) * (2 * np.pi / self.cols) + phase
        el, az = np.meshgrid(elev, azim, indexing="ij")
        ce = np.cos(el)
        dirs = np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)
        return dirs.reshape(-1, 3)


_DEFAULT_WEIGHTS = ClassMap.default().weights

# Reflectivity ranges per surface class; they overlap on purpose.
_REFLECTIVITY = {
    GROUND: (0.05, 0.35),
    VEHICLE: (0.35, 0.95),
    POLE: (0.3, 0.7),
    VEGETATION: (0.1, 0.5),
}


def _hit_ground(d, height, radius):
    t = np.full(len(d), np.inf)
    down = d[:, 2] < -1e-9
    t[down] = -height / d[down, 2]
    rho = t * np.hypot(d[:, 0], d[:, 1])
    t[~down | (rho > radius)] = np.inf
    return t


def _hit_box(d, center, yaw, size, z0):
    c, s = math.cos(yaw), math.sin(yaw)
    # ray origin is the sensor at 0; express everything in the box frame
    ox = -(c * center[0] + s * center[1])
    oy = -(-s * center[0] + c * center[1])
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    dz = d[:, 2]
    lo = np.array([-size[0] / 2, -size[1] / 2, z0])
    hi = np.array([size[0] / 2, size[1] / 2, z0 + size[2]])
    o = np.array([ox, oy, 0.0])
    dd = np.stack([dx, dy, dz], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / dd
        t2 = (hi - o) / dd
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(d, center, radius, z0, z1):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2 * (d[:, 0] * center[0] + d[:, 1] * center[1])
    c = center[0] ** 2 + center[1] ** 2 - radius**2
    disc = b * b - 4 * a * c
    t = np.full(len(d), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    t_ok = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    z = t_ok * d[ok, 2]
    t_ok[(t_ok <= 0) | (z < z0) | (z > z1)] = np.inf
    t[ok] = t_ok
    return t


def _hit_ellipsoid(d, center, radii):
    q = d / radii
    m = center / radii
    a = np.einsum("ij,ij->i", q, q)
    b = -2 * q @ m
    c = m @ m - 1
    disc = b * b - 4 * a * c
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    t_ok = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    t_ok[t_ok <= 0] = np.inf
    t[ok] = t_ok
    return t


def _place(rng, lo, hi):
    r = rng.uniform(lo, hi)
    phi = rng.uniform(-np.pi, np.pi)
    return np.array([r * math.cos(phi), r * math.sin(phi)])


def generate_scene(seed: int, config: SceneConfig | None = None) -> PointCloud:
    """Ray-cast one synthetic scene: ground disc, box vehicles, poles, blob vegetation.

    Each of the rows x cols beams emits at most one point (its first hit), so
    the result always has N <= rows * cols. Pure function of (seed, config).
    """
    config = config or SceneConfig()
    config.validate()
    k = config.classes.k
    rng = np.random.default_rng(seed)
    h = config.sensor_height
    dirs = config.ray_directions(phase=rng.uniform(0, 2 * np.pi / config.cols))

    surfaces = []  # (t per ray, class, reflectivity)

    def add(t, cls):
        if cls < k:
            surfaces.append((t, cls, rng.uniform(*_REFLECTIVITY[cls])))

    add(_hit_ground(dirs, h, config.ground_radius), GROUND)

    def count(mean, cls):
        if cls >= k or len(config.classes.weights) <= cls:
            return 0
        base = _DEFAULT_WEIGHTS[cls] if cls < len(_DEFAULT_WEIGHTS) else 1.0
        return int(rng.poisson(mean * config.classes.weights[cls] / base))

    for _ in range(count(config.vehicles, VEHICLE)):
        center = _place(rng, 5.0, 0.8 * config.ground_radius)
        size = (rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.1), rng.uniform(1.3, 2.0))
        add(_hit_box(dirs, center, rng.uniform(-np.pi, np.pi), size, -h), VEHICLE)
    for _ in range(count(config.poles, POLE)):
        center = _place(rng, 3.0, 0.7 * config.ground_radius)
        add(_hit_cylinder(dirs, center, rng.uniform(0.25, 0.45), -h, -h + rng.uniform(3.0, 5.0)), POLE)
    for _ in range(count(config.vegetation, VEGETATION)):
        xy = _place(rng, 5.0, 0.9 * config.ground_radius)
        radii = np.array([rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5), rng.uniform(0.8, 2.0)])
        center = np.array([xy[0], xy[1], -h + radii[2] * rng.uniform(0.6, 1.2)])
        add(_hit_ellipsoid(dirs, center, radii), VEGETATION)

    if not surfaces:
        return PointCloud(np.zeros((0, 4)), np.zeros(0, np.int64), num_classes=k)
    ts = np.stack([s[0] for s in surfaces])
    first = np.argmin(ts, axis=0)
    t = ts[first, np.arange(len(dirs))]
    hit = np.isfinite(t)
    first, t, d = first[hit], t[hit], dirs[hit]
    xyz = d * t[:, None]
    classes = np.array([s[1] for s in surfaces])[first]
    refl = np.array([s[2] for s in surfaces])[first]
    intensity = np.clip(refl * np.exp(-t / 80.0), 0.0, 1.0)
    pts = np.column_stack([xyz, intensity])
    return PointCloud(pts, classes, num_classes=k)


class SealedLabels:
    """Ground truth of unlabeled scenes, readable only through the metrics module."""

    def __init__(self, labels: list[np.ndarray]):
        self.__labels = [_frozen(np.array(x, dtype=np.int64)) for x in labels]

    def __len__(self) -> int:
        return len(self.__labels)

    def __getitem__(self, item):
        raise PermissionError("diagnostic labels are sealed; use collis.metrics")

    def __repr__(self) -> str:
        return f"SealedLabels(<{len(self.__labels)} sealed scenes>)"

    def _reveal(self, key: object, index: int) -> np.ndarray:
        if key is not _METRICS_KEY:
            raise PermissionError("diagnostic labels are sealed; use collis.metrics")
        return self.__labels[index]


_METRICS_KEY = object()


@dataclass
class DatasetSplit:
    labeled: list[PointCloud]
    unlabeled: list[PointCloud]
    validation: list[PointCloud] = field(default_factory=list)
    sealed: SealedLabels = field(default_factory=lambda: SealedLabels([]))
    labeled_index: tuple[int, ...] = ()
    unlabeled_index: tuple[int, ...] = ()


def split_dataset(
    scenes: list[PointCloud],
    fraction: float,
    seed: int,
    validation: list[PointCloud] | None = None,
) -> DatasetSplit:
    """Uniformly pick ceil(fraction * len(scenes)) scenes as labeled.

    Unlabeled scenes lose their labels; the stripped arrays go into the
    sealed diagnostic store in the same order as `unlabeled`.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}")
    if len(scenes) < 2:
        raise ConfigError("need at least 2 scenes to split")
    n_lab = math.ceil(fraction * len(scenes) - 1e-12)
    perm = np.random.default_rng(seed).permutation(len(scenes))
    lab_idx = np.sort(perm[:n_lab])
    unl_idx = np.sort(perm[n_lab:])
    for i in lab_idx:
        if scenes[i].labels is None:
            raise ConfigError(f"scene {i} has no labels")
    return DatasetSplit(
        labeled=[scenes[i] for i in lab_idx],
        unlabeled=[scenes[i].without_labels() for i in unl_idx],
        validation=list(validation or []),
        sealed=SealedLabels([scenes[i].labels for i in unl_idx]),
        labeled_index=tuple(int(i) for i in lab_idx),
        unlabeled_index=tuple(int(i) for i in unl_idx),
    )


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    k = cloud.num_classes
    if cloud.labels is not None:
        if k is None:
            raise ValueError("num_classes is required to write labels")
        if k > 256:
            raise ValueError("at most 256 classes fit in a label byte")
    flags = (_FLAG_LABELS if cloud.labels is not None else 0) | (
        _FLAG_ORIGIN if cloud.origin is not None else 0
    )
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, cloud.n, k or 0, flags))
        f.write(cloud.points.astype("<f4").tobytes())
        if cloud.labels is not None:
            f.write(cloud.labels.astype(np.uint8).tobytes())
        if cloud.origin is not None:
            f.write(cloud.origin.astype(np.uint8).tobytes())


def read_cloud(path: str | Path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CloudFormatError("truncated header")
    magic, version, n, k, flags = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise CloudFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise CloudFormatError(f"unsupported version {version}")
    if flags & ~(_FLAG_LABELS | _FLAG_ORIGIN):
        raise CloudFormatError(f"unknown flag bits {flags:#x}")
    has_labels, has_origin = bool(flags & _FLAG_LABELS), bool(flags & _FLAG_ORIGIN)
    expected = _HEADER.size + 16 * n + n * has_labels + n * has_origin
    if len(data) != expected:
        raise CloudFormatError(f"expected {expected} bytes, file has {len(data)}")
    off = _HEADER.size
    pts = np.frombuffer(data, "<f4", 4 * n, off).reshape(n, 4).astype(np.float32)
    off += 16 * n
    labels = origin = None
    if has_labels:
        labels = np.frombuffer(data, np.uint8, n, off).astype(np.int64)
        off += n
        if n and labels.max() >= k:
            raise CloudFormatError(f"label {labels.max()} out of range for K={k}")
    if has_origin:
        origin = np.frombuffer(data, np.uint8, n, off).copy()
        if n and origin.max() > ORIGIN_B:
            raise CloudFormatError("origin byte must be 0 or 1")
    try:
        return PointCloud(pts, labels, origin, k if (has_labels or k) else None)
    except ValueError as e:
        raise CloudFormatError(str(e)) from e
