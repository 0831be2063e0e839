"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    details = [f"{k}={v}" for k, v in item.user_properties]
    if report.skipped:
        status = "SKIP"
    elif report.failed:
        status = "FAIL"
    elif report.when == "call":
        status = "PASS"
    else:
        return
    entry = _RESULTS.setdefault(number, {"title": title, "parts": []})
    entry["parts"].append((item.name, status, details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        statuses = [s for _, s, _ in entry["parts"]]
        if "FAIL" in statuses:
            overall = "FAIL"
        elif "PASS" in statuses:
            overall = "PASS"
        else:
            overall = "SKIP"
        notes = "; ".join(f"{name}: {status}" + (f" ({', '.join(d)})" if d else "")
                          for name, status, d in entry["parts"])
        tr.write_line(f"criterion {number:>2} {overall}  {entry['title']}  [{notes}]")
