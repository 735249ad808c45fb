import numpy as np
import pytest

from poolcast.models import DgpParams, simulate_dgp, simulate_dgp_path
from poolcast.rng import stream


@pytest.fixture(scope="session")
def dgp():
    return DgpParams()


@pytest.fixture(scope="session")
def dgp_series(dgp):
    return simulate_dgp(dgp, 2000, stream(11, "fixture"))


@pytest.fixture(scope="session")
def dgp_path(dgp):
    return simulate_dgp_path(dgp, 20_000, stream(12, "fixture-path"))


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


def ar1_data(n, alpha0=0.1, alpha1=0.6, sigma=0.8, seed=0):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n + 200) * sigma
    y = np.zeros(n + 200)
    for t in range(1, y.size):
        y[t] = alpha0 + alpha1 * y[t - 1] + e[t]
    return y[200:]


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
