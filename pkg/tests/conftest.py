"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if report.passed else "FAIL"
    line = f"CRITERION {n:>2} {status}  {title} ({report.duration:.2f}s)"
    if details:
        line += f"  [{details}]"
    _RESULTS[n] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[n])
