import numpy as np
import pytest

from clbench.grid import grid_from_resolution
from clbench.store import FieldSeries, Variable

HOUR = 3600
T0_1979 = 283996800  # 1979-01-01T00:00:00Z


def make_series(T=8, names=("t2m",), res=45.0, step_hours=6, t0=T0_1979, seed=0, static=(), data=None):
    grid = grid_from_resolution(res)
    rng = np.random.default_rng(seed)
    C = len(names)
    if data is None:
        data = rng.standard_normal((T, C, grid.H, grid.W)).astype(np.float32)
        for c, n in enumerate(names):
            if n in static:
                data[:, c] = data[0, c]
    variables = [Variable(n, "K", static=n in static) for n in names]
    times = t0 + step_hours * HOUR * np.arange(T)
    return FieldSeries(grid, variables, times, data, time_step_seconds=step_hours * HOUR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
