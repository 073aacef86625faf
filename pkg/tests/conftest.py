"""Per-criterion pass/fail summary for the acceptance suite."""

from collections import defaultdict

import pytest

_outcomes = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    # a criterion fails if any of its tests fails in any phase
    if report.when == "call" or report.failed:
        _outcomes[marker.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_outcomes):
        status = "PASS" if all(_outcomes[criterion]) else "FAIL"
        terminalreporter.write_line(f"criterion {criterion}: {status}")
