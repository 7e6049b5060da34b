"""Shared pytest hooks.

Acceptance tests append one line per criterion to ``CRITERIA_LINES``; the
lines are echoed in the terminal summary so they are visible even when
output capture is on.
"""

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
