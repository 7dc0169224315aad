import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_report():
    """Call with ``(criterion, passed, detail)``; lines are printed in the summary."""
    def record(criterion, passed, detail):
        ACCEPTANCE_LINES.append((criterion, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:2d}: {status}  {detail}")
