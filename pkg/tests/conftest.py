import numpy as np
import pytest

from irqn.problems import (Dataset, LeastSquaresOracle, LogisticOracle, SyntheticLsq,
                           make_synthetic_logistic)


@pytest.fixture(scope="session")
def small_logistic():
    return LogisticOracle(make_synthetic_logistic(200, 12, density=0.3, seed=7))


@pytest.fixture(scope="session")
def small_dense_logistic():
    ds = make_synthetic_logistic(150, 6, density=0.6, seed=3, binary=False)
    return LogisticOracle(ds)


@pytest.fixture(scope="session")
def flat_lsq():
    """Rows a1 = a2 = (1, 0), b = 2: solution set {(2, t)}."""
    return SyntheticLsq(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([2.0, 2.0]))


def quadratic_oracle(n_rows=6, n=3, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n_rows, n))
    b = rng.standard_normal(n_rows)
    return LeastSquaresOracle(SyntheticLsq(A, b))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an exit criterion, then assert it."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
