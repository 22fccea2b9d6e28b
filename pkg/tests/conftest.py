import warnings

import numpy as np
import pytest

from spde_ergo.coefficients import make_preset
from spde_ergo.grid_noise import SpatialGrid

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail=""):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_cfl():
    # the flux resolution warning is advisory; tests choose dt deliberately
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*explicit flux may be under-resolved")
        yield


@pytest.fixture
def grid32():
    return SpatialGrid(32)


@pytest.fixture
def additive():
    """b = g = 0 with unit additive noise."""
    return make_preset("custom", sigma=1.0)


@pytest.fixture
def silent():
    """b = g = sigma = 0."""
    return make_preset("custom", sigma=0.0)


def h_rel(grid, a, b):
    return float(np.sqrt(grid.h_norm_sq(a - b) / grid.h_norm_sq(b)))
