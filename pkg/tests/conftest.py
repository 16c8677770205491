import numpy as np
import pytest

from conformal_friq.dataset import generate_dataset
from conformal_friq.sandbox import make_problem


@pytest.fixture(scope="session")
def problem():
    return make_problem()


@pytest.fixture(scope="session")
def small_dataset(problem):
    """400 instances, c = 8: enough for fast end-to-end checks."""
    return generate_dataset(problem, 400, 8, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
