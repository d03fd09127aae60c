"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_RESULTS: dict = {}


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        marker = getattr(report, "criterion", None)
        if marker is not None:
            _RESULTS[marker] = (report.outcome, report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = (int(m.args[0]), m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (outcome, seconds) in sorted(_RESULTS.items()):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{verdict}] {title} ({seconds:.2f} s)")
