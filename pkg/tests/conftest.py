import numpy as np
import pytest

from sparc.sim import PedestrianParams, WorldConfig


@pytest.fixture
def cfg():
    return WorldConfig()


@pytest.fixture
def params():
    return PedestrianParams()


@pytest.fixture
def quiet_params():
    """Pedestrian with the default mean model but no noise."""
    return PedestrianParams(sigma_par=0.0, sigma_perp=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
