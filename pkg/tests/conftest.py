import numpy as np
import pytest

from collis.data import PointCloud, SceneConfig, generate_scene, split_dataset


def random_cloud(rng, n, k=4, labels=True, radius=20.0):
    """Points scattered roughly like a sensor sweep, with random labels."""
    az = rng.uniform(-np.pi, np.pi, n)
    r = rng.uniform(1.0, radius, n)
    z = rng.uniform(-1.7, 1.5, n)
    pts = np.column_stack([r * np.cos(az), r * np.sin(az), z, rng.uniform(0, 1, n)])
    lab = rng.integers(0, k, n) if labels else None
    return PointCloud(pts.astype(np.float32), lab, None, k)


def beam_cloud(rng, rows=16, cols=64, k=4):
    """Ray-cast style cloud: one return per beam at a random depth, some beams dropped."""
    cfg = SceneConfig(rows=rows, cols=cols)
    dirs = cfg.ray_directions(rng.uniform(0, 2 * np.pi / cols))
    keep = rng.random(len(dirs)) < 0.8
    dirs = dirs[keep]
    t = rng.uniform(1.0, 30.0, len(dirs))
    xyz = dirs * t[:, None]
    pts = np.column_stack([xyz, rng.uniform(0, 1, len(dirs))])
    return PointCloud(pts.astype(np.float32), rng.integers(0, k, len(dirs)), None, k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_split():
    cfg = SceneConfig(rows=8, cols=32)
    scenes = [generate_scene(100 + i, cfg) for i in range(6)]
    val = [generate_scene(900 + i, cfg) for i in range(2)]
    return split_dataset(scenes, 0.34, 7, val)


ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def _report(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
