"""Range-image, polar-BEV and cylindrical-voxel projections of a point cloud.

Every representation is reached through the point cloud: a ``ReprMapping``
records which flat cell each point falls in and which point represents each
occupied cell, so values can be routed point -> cell, cell -> point and
cell -> point -> cell between two representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError, PointCloud

KINDS = ("range", "polar", "voxel")
N_CELL_CHANNELS = 6


@dataclass(frozen=True)
class ReprConfig:
    kind: str
    # range image
    rows: int = 16
    cols: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    # polar BEV / cylindrical voxel
    radial_bins: int = 16
    azimuth_bins: int = 32
    height_bins: int = 8
    max_radius: float = 25.0
    z_min: float = -2.0
    z_max: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown representation kind {self.kind!r}")
        bins = (self.rows, self.cols, self.radial_bins, self.azimuth_bins, self.height_bins)
        if min(bins) < 1:
            raise ConfigError("all bin counts must be >= 1")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")
        if self.max_radius <= 0 or not self.z_max > self.z_min:
            raise ConfigError("representation extents must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        if self.kind == "range":
            return (self.rows, self.cols)
        if self.kind == "polar":
            return (self.radial_bins, self.azimuth_bins)
        return (self.radial_bins, self.azimuth_bins, self.height_bins)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True, eq=False)
class ReprMapping:
    """Point/cell index tables for one cloud under one representation.

    ``cell_winner`` and ``occupancy`` are dense arrays over the flat grid;
    unoccupied cells hold -1 and 0 respectively. ``cells`` lists the
    occupied flat indices in ascending order.
    """

    config: ReprConfig
    point_to_cell: np.ndarray
    cell_winner: np.ndarray
    occupancy: np.ndarray
    cells: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.point_to_cell)

    @property
    def in_bounds(self) -> np.ndarray:
        return self.point_to_cell >= 0

    def winners(self) -> dict[int, int]:
        return {int(c): int(self.cell_winner[c]) for c in self.cells}


def _azimuth_bin(x, y, bins):
    phi = np.arctan2(y, x)
    col = np.floor((phi + np.pi) / (2 * np.pi) * bins).astype(np.int64)
    return np.clip(col, 0, bins - 1)


def _linear_bin(v, lo, hi, bins):
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def grid_indices(xyz: np.ndarray, config: ReprConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-point flat cell index (-1 if out of bounds) and the winner sort key."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rho2 = np.hypot(x, y)
    if config.kind == "range":
        rho3 = np.sqrt(rho2**2 + z**2)
        with np.errstate(invalid="ignore", divide="ignore"):
            theta = np.degrees(np.arcsin(np.clip(z / rho3, -1.0, 1.0)))
        fu, fd = config.fov_up, config.fov_down
        row = np.floor((1.0 - (theta - fd) / (fu - fd)) * config.rows)
        row = np.clip(np.nan_to_num(row), 0, config.rows - 1).astype(np.int64)
        col = _azimuth_bin(x, y, config.cols)
        flat = row * config.cols + col
        ok = (rho3 > 0) & (theta >= fd) & (theta <= fu)
        return np.where(ok, flat, -1), rho3

    rbin = _linear_bin(rho2, 0.0, config.max_radius, config.radial_bins)
    abin = _azimuth_bin(x, y, config.azimuth_bins)
    ok = rho2 <= config.max_radius
    dr = config.max_radius / config.radial_bins
    da = 2 * np.pi / config.azimuth_bins
    rc = (rbin + 0.5) * dr
    ac = -np.pi + (abin + 0.5) * da
    d2 = (x - rc * np.cos(ac)) ** 2 + (y - rc * np.sin(ac)) ** 2
    flat = rbin * config.azimuth_bins + abin
    if config.kind == "voxel":
        hbin = _linear_bin(z, config.z_min, config.z_max, config.height_bins)
        dz = (config.z_max - config.z_min) / config.height_bins
        d2 = d2 + (z - (config.z_min + (hbin + 0.5) * dz)) ** 2
        flat = flat * config.height_bins + hbin
        ok &= (z >= config.z_min) & (z <= config.z_max)
    return np.where(ok, flat, -1), d2


def project(cloud: PointCloud | np.ndarray, config: ReprConfig) -> ReprMapping:
    """Bin every point and pick one winner point per occupied cell.

    Range winners are the nearest point (z-buffering); polar and voxel
    winners are closest to the cell centre. Ties go to the lowest index.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)[:, :3]
    flat, key = grid_indices(xyz, config)
    n_cells = config.n_cells
    winner = np.full(n_cells, -1, dtype=np.int64)
    inb = np.flatnonzero(flat >= 0)
    occupancy = np.bincount(flat[inb], minlength=n_cells)
    if len(inb):
        order = np.lexsort((inb, key[inb], flat[inb]))
        sorted_cells = flat[inb][order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_cells[1:] != sorted_cells[:-1]
        winner[sorted_cells[first]] = inb[order][first]
    cells = np.flatnonzero(occupancy)
    for arr in (flat, winner, occupancy, cells):
        arr.flags.writeable = False
    return ReprMapping(config, flat, winner, occupancy, cells)


def cell_features(cloud: PointCloud, mapping: ReprMapping, coord_scale: float = 10.0) -> np.ndarray:
    """Per-point copy of its cell's six grid channels (zeros when out of bounds).

    Channels: mean x, y, z, intensity of the cell's points, log(1 + count)
    and depth of the cell's winner point. Lengths are divided by `coord_scale`.
    """
    n = cloud.n
    out = np.zeros((n, N_CELL_CHANNELS))
    inb = np.flatnonzero(mapping.point_to_cell >= 0)
    if not len(inb):
        return out
    cells, local = np.unique(mapping.point_to_cell[inb], return_inverse=True)
    pts = cloud.points[inb].astype(np.float64)
    counts = np.bincount(local).astype(np.float64)
    sums = np.column_stack([np.bincount(local, pts[:, c], len(cells)) for c in range(4)])
    means = sums / counts[:, None]
    means[:, :3] /= coord_scale
    win = mapping.cell_winner[cells]
    depth = np.linalg.norm(cloud.points[win, :3].astype(np.float64), axis=1) / coord_scale
    table = np.column_stack([means, np.log1p(counts), depth])
    out[inb] = table[local]
    return out


def scatter_labels(mapping: ReprMapping, per_point: np.ndarray) -> dict[int, int]:
    """Per occupied cell, the label of that cell's winner point."""
    per_point = np.asarray(per_point)
    if len(per_point) != mapping.n_points:
        raise ValueError(f"got {len(per_point)} labels for {mapping.n_points} points")
    return {int(c): int(per_point[mapping.cell_winner[c]]) for c in mapping.cells}


def scatter_array(mapping: ReprMapping, per_point: np.ndarray, fill=-1) -> np.ndarray:
    """Dense-grid variant of :func:`scatter_labels`."""
    per_point = np.asarray(per_point)
    if len(per_point) != mapping.n_points:
        raise ValueError(f"got {len(per_point)} values for {mapping.n_points} points")
    grid = np.full(mapping.config.n_cells, fill, dtype=per_point.dtype)
    grid[mapping.cells] = per_point[mapping.cell_winner[mapping.cells]]
    return grid


def gather(mapping: ReprMapping, cell_values: dict[int, int] | np.ndarray, fill=-1) -> np.ndarray:
    """Read each point's cell value back into point space (out of bounds -> fill)."""
    if isinstance(cell_values, dict):
        grid = np.full(mapping.config.n_cells, fill, dtype=np.int64)
        for c, v in cell_values.items():
            grid[c] = v
    else:
        grid = np.asarray(cell_values)
    inb = mapping.point_to_cell >= 0
    out = np.full(mapping.n_points, fill, dtype=grid.dtype)
    out[inb] = grid[mapping.point_to_cell[inb]]
    return out


def compose_mapping(src: ReprMapping, dst: ReprMapping) -> dict[int, int]:
    """Route each occupied source cell through its winner point into `dst`.

    This is the cross-representation transfer: source cell -> point -> target
    cell. The target entry is -1 when the winner is out of bounds in `dst`.
    """
    if src.n_points != dst.n_points:
        raise ValueError(f"mappings built from different clouds ({src.n_points} vs {dst.n_points} points)")
    return {int(c): int(dst.point_to_cell[src.cell_winner[c]]) for c in src.cells}
