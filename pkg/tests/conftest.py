import numpy as np
import pytest

from l2c.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def random_simplex(rng, n, k, concentration=0.3):
    return rng.dirichlet(np.full(k, concentration), size=n)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.summary_lines():
            terminalreporter.write_line(line)
