"""Shared test plumbing: acceptance-criteria verdict reporting."""

ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{verdict:4s} {label}")
