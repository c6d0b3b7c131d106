import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one PASS/FAIL line per numbered criterion

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")
    config.stash[_VERDICTS] = {}


def _line(n, ok, detail):
    return f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture
def verdict(request):
    """Record and assert the outcome of the test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail):
        line = _line(n, ok, detail)
        print(line)
        request.config.stash[_VERDICTS][n] = line
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not rep.failed:
        return
    seen = item.config.stash[_VERDICTS]
    n = marker.args[0]
    if n not in seen:  # crashed before reaching a verdict
        seen[n] = _line(n, False, f"error during {rep.when}: {call.excinfo.typename}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter, config):
    seen = config.stash[_VERDICTS]
    if not seen:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(seen):
        terminalreporter.write_line(seen[n])
