import numpy as np
import pytest

from fbmcontrol.kernel import TimeGrid
from fbmcontrol.paths import sample_ensemble

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line for the terminal summary."""
    def record(number, passed, text):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


@pytest.fixture(scope="session")
def grid64():
    return TimeGrid.uniform(1.0, 64)


@pytest.fixture(scope="session")
def ens64(grid64):
    return sample_ensemble(grid64, 0.7, 20000, seed=2024)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)
