import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _quiet_float_warnings():
    with np.errstate(over="ignore", under="ignore"):
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
