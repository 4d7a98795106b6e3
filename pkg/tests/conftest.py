import numpy as np
import pytest
from hypothesis import settings

from contourgp.gp_core import KernelParams, TrainingSet

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


def random_fixture(seed, n=12, d=2, tau=0.1):
    """Small random GP fixture: params, data and a test grid."""
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = np.sin(3 * X).sum(axis=1) + tau * rng.standard_normal(n)
    p = KernelParams(1.0 + rng.random(), tuple(0.3 + 0.7 * rng.random(d)), tau)
    return p, TrainingSet(X, y), rng.random((20, d))


@pytest.fixture
def fixture2d():
    return random_fixture(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
