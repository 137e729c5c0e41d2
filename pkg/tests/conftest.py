"""Shared test plumbing: per-criterion summary lines for the acceptance run."""

# Populated by tests/test_acceptance.py: number -> (status, description).
CRITERION_RESULTS = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(CRITERION_RESULTS):
        status, desc = CRITERION_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status} - {desc}")
