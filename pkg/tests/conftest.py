import numpy as np
import pytest

_criteria = {}
_details = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call":
        _details.setdefault(marker, []).extend(v for k, v in report.user_properties if k == "run")
    ok = _criteria.get(marker, True)
    if report.when == "call" or report.failed:
        _criteria[marker] = ok and report.passed
    elif report.skipped:
        _criteria[marker] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}")
        for line in _details.get((number, title), []):
            terminalreporter.write_line(f"    {line}")
