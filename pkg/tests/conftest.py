import pytest

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or (failed and report.when == "setup"):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA.append((marker.args[0], "FAIL" if failed else "PASS", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {label}" + (f"  ({detail})" if detail else ""))
