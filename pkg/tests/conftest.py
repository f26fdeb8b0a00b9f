import re

_CRITERIA: dict[str, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::(?:\w+::)?test_(a\d)_", report.nodeid)
    if not m or (report.when != "call" and not report.failed and not report.skipped):
        return
    outcome = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    _CRITERIA.setdefault(m.group(1).upper(), []).append((outcome, detail))


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the measured values."""
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k[1:])):
        outcomes = [o for o, _ in _CRITERIA[key]]
        status = "FAIL" if "FAIL" in outcomes else "SKIP" if "SKIP" in outcomes else "PASS"
        details = "; ".join(d for _, d in _CRITERIA[key] if d)
        terminalreporter.write_line(f"{key}: {status}" + (f"  ({details})" if details else ""))
