"""Shared pytest wiring.

The acceptance tests buffer their verdict lines here; echoing them from the
terminal-summary hook keeps them visible no matter which capture mode the
run uses.
"""

acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)
