import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, name = mark.args
    slot = _criteria.setdefault(number, {"name": name, "ok": True, "ran": False, "seconds": 0.0})
    if report.when == "call":
        slot["ran"] = True
        slot["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        slot["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        verdict = "PASS" if c["ok"] and c["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number} {c['name']}: {verdict} ({c['seconds']:.1f} s)")
