import pytest

_LINES = {}


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion; printed after the run."""
    def add(number, text):
        _LINES[number] = text
        print(f"criterion {number:2d}: {text}")
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(f"criterion {number:2d}: {_LINES[number]}")
