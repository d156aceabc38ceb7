def pytest_terminal_summary(terminalreporter):
    import sys

    criteria = sys.modules.get("criteria")
    results = getattr(criteria, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
