import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_criteria = {}
_notes = []


@pytest.fixture
def acceptance_note():
    """Record a measured value to print under the criterion summary."""
    return lambda n, text: _notes.append((n, text))


def pytest_configure(config):
    for n in range(1, 10):
        config.addinivalue_line("markers", f"criterion_{n}: acceptance criterion {n}")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key in report.keywords:
        if key.startswith("criterion_"):
            n = int(key.split("_", 1)[1])
            _criteria.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _criteria[n]
        ok = outcomes and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({len(outcomes)} checks)")
    for n, text in sorted(_notes, key=lambda x: x[0]):
        terminalreporter.write_line(f"  [{n}] {text}")
