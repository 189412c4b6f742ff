import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    prev = _RESULTS.get(number, (title, "PASS"))[1]
    _RESULTS[number] = (title, "FAIL" if "FAIL" in (prev, status) else status)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_RESULTS):
        title, status = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}")
