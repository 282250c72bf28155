import warnings

import numpy as np
import pytest

from nmqsd.kernels import TimeGrid, discretize_bath, make_spectral_density


def four_mode_bath():
    """Ohmic-exp gamma=0.05, Lambda=2, four midpoint modes on [0, 4]."""
    J = make_spectral_density("ohmic-exp", 0.05, 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return discretize_bath(J, 0.0, 4, 4.0)


@pytest.fixture(scope="session")
def bath4():
    return four_mode_bath()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def convergence_order(err_coarse, err_fine):
    return float(np.log2(err_coarse / err_fine))


@pytest.fixture
def grid_short():
    return TimeGrid.from_t_max(2.0, 0.01)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
