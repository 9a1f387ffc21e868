import math

import pytest

from slm.core import MCEstimate, RandomSource, joint_z

Z = 3.0


def within(est: MCEstimate, target, k: float = Z) -> bool:
    return abs(joint_z(est, target)) < k


def separated(hi: MCEstimate, lo: MCEstimate, k: float = Z) -> bool:
    """``hi`` exceeds ``lo`` by more than k joint standard errors."""
    return joint_z(hi, lo) > k


@pytest.fixture
def src():
    return RandomSource(20240611)


def phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# one "criterion k: PASS/FAIL ..." line per acceptance check, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
