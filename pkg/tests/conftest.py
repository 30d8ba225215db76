def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance check at the end of the run."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in report.nodeid and report.when == "call":
                name = report.nodeid.split("::")[-1]
                rows.append((name, "PASS" if report.passed else "FAIL"))
    if rows:
        terminalreporter.section("acceptance summary")
        for name, verdict in sorted(rows):
            terminalreporter.write_line(f"{verdict}  {name}")
