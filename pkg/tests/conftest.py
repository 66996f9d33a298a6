import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance results collected as (label, passed, detail)
ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    def _report(label: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE_LINES.append((label, bool(passed), detail))
        return bool(passed)

    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[0].split()[1].rstrip(":"))):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
