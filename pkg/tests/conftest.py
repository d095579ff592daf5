"""Shared test plumbing: collects acceptance criterion results for the summary."""

import pytest

_criterion_lines = []


@pytest.fixture
def report_criterion():
    def _report(line):
        _criterion_lines.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
