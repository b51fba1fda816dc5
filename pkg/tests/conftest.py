"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import re

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error"
        _ACCEPTANCE[int(m.group(1))] = (m.group(2).replace("_", " "), "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        name, status, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} ({name}): {status}  {detail}")
