import sys

import numpy as np
import pytest

from cyclewatch.model import ENERGY_PARAM, MASS_PARAM, CycleFrame, DType, ParameterCatalog


@pytest.fixture(scope="session")
def catalog():
    return ParameterCatalog.demo()


def synthetic_frames(catalog, cell="cell01", n=10, first=0, seed=0, start_ms=1_700_000_000_000):
    """Random but store-friendly frames: values rounded to 3 decimals, bools 0/1."""
    rng = np.random.default_rng(seed)
    params = catalog.ids
    frames = []
    ts = start_ms
    energy = 1000.0
    for i in range(n):
        T = int(rng.integers(27, 34))
        grid = np.empty((len(params), T))
        for p, spec in enumerate(catalog):
            if spec.dtype is DType.BOOL:
                grid[p] = 0.0
                grid[p, 0] = 1.0
            else:
                grid[p] = np.round(rng.uniform(spec.nominal_min, min(spec.nominal_max, spec.nominal_min + 500), T), 3)
        e = params.index(ENERGY_PARAM)
        grid[e] = np.round(energy + np.cumsum(rng.uniform(0, 0.01, T)), 4)
        energy = grid[e, -1] + 0.005
        scalars = {"energy_kwh": float(grid[e, -1] - grid[e, 0]),
                   "part_mass_g": float(grid[params.index(MASS_PARAM), -1])}
        frames.append(CycleFrame(cell, first + i, ts, ts + 1000 * T, params, grid, scalars))
        ts += 1000 * T
    return frames


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, when that module was collected."""
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.TITLES):
        terminalreporter.write_line(mod.summary_line(n))
