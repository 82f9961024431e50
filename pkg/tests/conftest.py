import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("desk", max_examples=40, deadline=None)
settings.load_profile("desk")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_report_header(config):
    return f"numpy {np.__version__}, python {sys.version.split()[0]}"


# One summary line per acceptance criterion, whatever the capture mode.
_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = getattr(item, "criterion_detail", "")
        _criteria[n] = (status, f"{title}{' | ' + detail if detail else ''}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, text = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {text}")
