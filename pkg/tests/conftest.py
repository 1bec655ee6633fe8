import re

_LINES = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when == "call" or report.failed or report.skipped:
        prev = _LINES.get(key)
        ok = report.passed and (prev is None or prev[1])
        _LINES[key] = (m.group(2).replace("_", " "), ok if report.when == "call" else False)


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES):
        name, ok = _LINES[key]
        terminalreporter.write_line(f"criterion {key} ({name}): {'PASS' if ok else 'FAIL'}")
