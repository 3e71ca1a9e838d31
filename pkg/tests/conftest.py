acceptance_reports = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        acceptance_reports.append((name, report.passed, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not acceptance_reports:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, duration in acceptance_reports:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {name} ({duration:.1f}s)")
