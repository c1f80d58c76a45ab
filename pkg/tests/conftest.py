import numpy as np
import pytest

from hyperseg.hypercube import WavelengthGrid


@pytest.fixture
def weee_grid():
    return WavelengthGrid.weee()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
