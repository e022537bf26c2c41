import os
import sys

import pytest

# the oracles module lives next to the tests
sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "passed": True, "details": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        status = "PASS" if entry["passed"] else "FAIL"
        line = f"{status}  criterion {number}: {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
