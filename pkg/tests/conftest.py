import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cble_lab.branching_core import BranchingMechanism  # noqa: E402
from cble_lab.env_model import EnvironmentSpec  # noqa: E402


@pytest.fixture
def strong_env():
    """Strongly subcritical Brownian environment: Phi(1) = -1.5, Phi'(1) = -1."""
    return EnvironmentSpec.brownian(-2.0, 1.0)


@pytest.fixture
def inter_env():
    """Intermediate Brownian environment: Phi'(1) = 0."""
    return EnvironmentSpec.brownian(-1.0, 1.0)


@pytest.fixture
def stable_half():
    return BranchingMechanism.stable_mechanism(1.0, 0.5)


@pytest.fixture
def feller():
    return BranchingMechanism.stable_mechanism(1.0, 1.0)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_report.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
