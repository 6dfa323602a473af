import pytest

from oracles import random_instance

_ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def small_instance():
    return random_instance(0)


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one verdict line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
