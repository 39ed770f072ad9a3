import numpy as np
import pytest

from passat.data_io import synth_dataset
from passat.sphere_grid import Grid
from passat.spherical_graph import build_graph, calibrate_threshold, scaled_kernel_gain

# One PASS/FAIL line per acceptance criterion, filled by test_acceptance.py.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def toy_graph_for(grid: Grid, min_degree: int = 5, metric: str = "haversine"):
    gain = scaled_kernel_gain(grid)
    thr = calibrate_threshold(grid, min_degree, kernel_gain=gain, metric=metric)
    return build_graph(grid, gain, thr, metric=metric)


@pytest.fixture(scope="session")
def toy_grid():
    return Grid(8, 16)


@pytest.fixture(scope="session")
def toy_graph(toy_grid):
    return toy_graph_for(toy_grid)


@pytest.fixture(scope="session")
def tiny_grid():
    # 2 x 4 = 8 nodes: the smallest raster used for exhaustive gradient checks.
    return Grid(2, 4)


@pytest.fixture(scope="session")
def tiny_graph(tiny_grid):
    return toy_graph_for(tiny_grid, min_degree=2)


@pytest.fixture(scope="session")
def standard_grid():
    return Grid(32, 64)


@pytest.fixture(scope="session")
def toy_dataset(toy_grid):
    return synth_dataset(0, toy_grid, 24)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
