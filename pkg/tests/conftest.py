"""Collects acceptance-criterion verdicts and prints them after the run."""
import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)``; the summary prints one line each."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        _VERDICTS.append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
