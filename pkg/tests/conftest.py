import re
import pytest

from meanfield_lab.bridge import ValueFunctionField
from meanfield_lab.free_energy import RegularizationParams, solve_boltzmann_fixed_point
from meanfield_lab.problem import sine_problem


@pytest.fixture(scope="session")
def prob():
    return sine_problem()


@pytest.fixture(scope="session")
def params():
    # lazy preset: beta = sqrt(tau d) = 0.2
    return RegularizationParams.lazy(0.2)


@pytest.fixture(scope="session")
def sol(prob, params):
    return solve_boltzmann_fixed_point(prob, params)


@pytest.fixture(scope="session")
def vf(prob, sol):
    return ValueFunctionField(prob, sol)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(re.match(r"\d+", s.split()[1]).group()), s)):
            terminalreporter.write_line(line)
