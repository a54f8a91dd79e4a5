import numpy as np
import pytest

from medrobust.simulation import DgpConfig, gen_cohort


@pytest.fixture(scope="session")
def small_cohort():
    return gen_cohort(DgpConfig(n=40, T=100, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
