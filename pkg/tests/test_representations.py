import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collis.data import ConfigError, PointCloud
from collis.representations import (
    ReprConfig,
    cell_features,
    compose_mapping,
    gather,
    grid_indices,
    project,
    scatter_array,
    scatter_labels,
)

from conftest import beam_cloud, random_cloud
from oracles import brute_winners, scalar_cell

KINDS = ("range", "polar", "voxel")


class TestConfig:
    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            ReprConfig("bev")

    def test_zero_bins(self):
        with pytest.raises(ConfigError):
            ReprConfig("range", rows=0)

    def test_fov_order(self):
        with pytest.raises(ConfigError):
            ReprConfig("range", fov_up=-30.0)

    def test_shapes(self):
        assert ReprConfig("range").shape == (16, 64)
        assert ReprConfig("polar").shape == (16, 32)
        assert ReprConfig("voxel").n_cells == 16 * 32 * 8


class TestProject:
    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_scalar_reference(self, rng, kind):
        cfg = ReprConfig(kind)
        cloud = random_cloud(rng, 300, radius=30.0)
        m = project(cloud, cfg)
        ref = [scalar_cell(p, cfg)[0] for p in cloud.points.astype(np.float64)]
        np.testing.assert_array_equal(m.point_to_cell, ref)
        assert m.winners() == brute_winners(cloud.points.astype(np.float64), cfg)

    def test_range_winner_is_nearest(self):
        pts = np.array([[10.0, 0.0, -1.0, 0.5], [5.0, 0.0, -0.5, 0.5]], np.float32)
        cloud = PointCloud(pts, np.array([1, 2]), None, 4)
        m = project(cloud, ReprConfig("range"))
        assert m.point_to_cell[0] == m.point_to_cell[1]
        assert scatter_labels(m, cloud.labels) == {int(m.point_to_cell[0]): 2}

    def test_ties_go_to_lowest_index(self):
        pts = np.array([[5.0, 0.0, -1.0, 0.1]] * 3, np.float32)
        m = project(pts, ReprConfig("polar"))
        assert m.winners() == {int(m.point_to_cell[0]): 0}
        assert m.occupancy[m.point_to_cell[0]] == 3

    def test_out_of_bounds(self):
        pts = np.array([
            [5.0, 0.0, 3.0, 0.0],  # elevation ~31 deg, above the fov
            [40.0, 0.0, 0.0, 0.0],  # beyond max radius
            [3.0, 0.0, 5.0, 0.0],  # above z_max
            [0.0, 0.0, 0.0, 0.0],  # the sensor origin
        ], np.float32)
        r = project(pts, ReprConfig("range")).point_to_cell
        p = project(pts, ReprConfig("polar")).point_to_cell
        v = project(pts, ReprConfig("voxel")).point_to_cell
        assert r[0] == -1 and r[3] == -1
        assert p[1] == -1 and p[2] >= 0
        assert v[1] == -1 and v[2] == -1

    def test_empty_cloud(self):
        m = project(np.zeros((0, 4)), ReprConfig("voxel"))
        assert m.n_points == 0 and len(m.cells) == 0
        assert scatter_labels(m, np.zeros(0, np.int64)) == {}

    @settings(max_examples=60, deadline=None)
    @given(
        kind=st.sampled_from(KINDS),
        pts=st.lists(
            st.tuples(
                st.floats(-60, 60, allow_nan=False),
                st.floats(-60, 60, allow_nan=False),
                st.floats(-20, 20, allow_nan=False),
            ),
            min_size=1,
            max_size=40,
        ),
    )
    def test_indices_never_leave_grid(self, kind, pts):
        cfg = ReprConfig(kind)
        xyz = np.array(pts, dtype=np.float64)
        flat, _ = grid_indices(xyz, cfg)
        assert np.all((flat == -1) | ((flat >= 0) & (flat < cfg.n_cells)))

    @pytest.mark.parametrize("kind", KINDS)
    def test_adversarial_edges_clamp(self, kind):
        cfg = ReprConfig(kind)
        az = np.linspace(-np.pi, np.pi, 33)
        rows = []
        for a in az:
            for theta in (cfg.fov_up, cfg.fov_down):
                t = np.radians(theta)
                rows.append([10 * np.cos(t) * np.cos(a), 10 * np.cos(t) * np.sin(a), 10 * np.sin(t)])
            rows.append([cfg.max_radius * np.cos(a), cfg.max_radius * np.sin(a), cfg.z_max])
            rows.append([cfg.max_radius * np.cos(a), cfg.max_radius * np.sin(a), cfg.z_min])
        rows.append([-1.0, -0.0, 0.0])  # azimuth exactly pi
        xyz = np.array(rows)
        flat, _ = grid_indices(xyz, cfg)
        assert flat.max() < cfg.n_cells
        assert np.all((flat == -1) | (flat >= 0))
        shaped = np.unravel_index(flat[flat >= 0], cfg.shape)
        for axis, size in zip(shaped, cfg.shape):
            assert axis.min() >= 0 and axis.max() < size


class TestScatterGather:
    @pytest.mark.parametrize("kind", KINDS)
    def test_unique_cells_round_trip(self, rng, kind):
        cfg = ReprConfig(kind)
        cloud = random_cloud(rng, 200)
        m = project(cloud, cfg)
        first = np.unique(m.point_to_cell, return_index=True)[1]
        keep = [i for i in first if m.point_to_cell[i] >= 0]
        sub = cloud.subset(np.array(keep))
        ms = project(sub, cfg)
        assert len(ms.cells) == sub.n
        np.testing.assert_array_equal(gather(ms, scatter_labels(ms, sub.labels)), sub.labels)
        np.testing.assert_array_equal(gather(ms, scatter_array(ms, sub.labels)), sub.labels)

    def test_length_mismatch(self, rng):
        m = project(random_cloud(rng, 10), ReprConfig("polar"))
        with pytest.raises(ValueError):
            scatter_labels(m, np.zeros(9, np.int64))

    def test_gather_fills_out_of_bounds(self):
        pts = np.array([[5.0, 0.0, -1.0, 0.0], [50.0, 0.0, 0.0, 0.0]], np.float32)
        m = project(pts, ReprConfig("polar"))
        out = gather(m, scatter_labels(m, np.array([3, 1])), fill=-7)
        np.testing.assert_array_equal(out, [3, -7])


class TestCompose:
    @pytest.mark.parametrize("src_kind,dst_kind", [("range", "voxel"), ("polar", "range"), ("voxel", "polar")])
    def test_matches_brute_force_route(self, rng, src_kind, dst_kind):
        cloud = random_cloud(rng, 64)
        s, d = ReprConfig(src_kind), ReprConfig(dst_kind)
        pts = cloud.points.astype(np.float64)
        expected = {c: scalar_cell(pts[w], d)[0] for c, w in brute_winners(pts, s).items()}
        assert compose_mapping(project(cloud, s), project(cloud, d)) == expected

    @pytest.mark.parametrize("kind", KINDS)
    def test_self_composition_is_identity(self, rng, kind):
        m = project(random_cloud(rng, 100), ReprConfig(kind))
        assert compose_mapping(m, m) == {int(c): int(c) for c in m.cells}

    def test_single_point(self):
        pts = np.array([[6.0, 2.0, -1.0, 0.2]], np.float32)
        r = project(pts, ReprConfig("range"))
        v = project(pts, ReprConfig("voxel"))
        assert compose_mapping(r, v) == {int(r.point_to_cell[0]): int(v.point_to_cell[0])}

    def test_mismatched_clouds(self, rng):
        a = project(random_cloud(rng, 5), ReprConfig("range"))
        b = project(random_cloud(rng, 6), ReprConfig("voxel"))
        with pytest.raises(ValueError):
            compose_mapping(a, b)


class TestCellFeatures:
    def test_channels(self):
        pts = np.array([[3.0, 0.0, -1.0, 0.2], [3.1, 0.0, -1.0, 0.4], [50.0, 0.0, 0.0, 0.1]], np.float32)
        cloud = PointCloud(pts)
        m = project(cloud, ReprConfig("polar"))
        f = cell_features(cloud, m, coord_scale=10.0)
        assert m.point_to_cell[0] == m.point_to_cell[1]
        np.testing.assert_allclose(f[0, :4], [0.305, 0.0, -0.1, 0.3], atol=1e-6)
        np.testing.assert_allclose(f[0, 4], np.log(3.0))
        np.testing.assert_array_equal(f[0], f[1])
        np.testing.assert_array_equal(f[2], np.zeros(6))

    def test_beam_clouds_mostly_in_range_fov(self, rng):
        cloud = beam_cloud(rng)
        m = project(cloud, ReprConfig("range"))
        assert m.in_bounds.mean() > 0.99
