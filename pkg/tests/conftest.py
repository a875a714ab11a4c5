import numpy as np
import pytest

from hjmanifold.linear import SeparatedSystem
from hjmanifold.picard import certify
from hjmanifold.problems import get_control_problem, get_problem


@pytest.fixture(scope="session")
def exp2d():
    return get_problem("exp2d")


@pytest.fixture(scope="session")
def lqr2d():
    return get_problem("lqr2d")


@pytest.fixture(scope="session")
def harmonic():
    return get_problem("harmonic")


@pytest.fixture(scope="session")
def exp2d_control():
    return get_control_problem("exp2d")


@pytest.fixture(scope="session")
def lqr2d_control():
    return get_control_problem("lqr2d")


@pytest.fixture(scope="session")
def exp2d_sep(exp2d):
    return SeparatedSystem.from_problem(exp2d)


@pytest.fixture(scope="session")
def lqr2d_sep(lqr2d):
    return SeparatedSystem.from_problem(lqr2d)


@pytest.fixture(scope="session")
def exp2d_cert(exp2d):
    return certify(1.0, 1.0, exp2d.lipschitz, None, 0.12)


@pytest.fixture(scope="session")
def xi_diag():
    return 0.12 * np.array([1.0, 1.0]) / np.sqrt(2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
