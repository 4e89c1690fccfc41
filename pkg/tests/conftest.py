import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wifiloc.checks import tiny_site
from wifiloc.ingest import FingerprintRecord

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


# filled by test_acceptance.report so the verdicts survive output capture
ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment tests")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def make_record(wid, readings, coord=(0.0, 0.0), floor="F0"):
    return FingerprintRecord(wid, coord, floor, tuple(readings))


@pytest.fixture(scope="session")
def site():
    """(records, preprocessor, graph) for a 2-floor toy site."""
    return tiny_site(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
