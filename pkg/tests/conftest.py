import numpy as np
import pytest

from localbatch.problems import QuadraticProblem


def gradient_toy(values):
    """1-D least squares whose per-sample gradients at x = 0 are exactly ``values``.

    With a_i = 1 and y_i = -v_i, grad f_i(0) = a_i (a_i * 0 - y_i) = v_i.
    """
    v = np.asarray(values, dtype=np.float64)
    return QuadraticProblem(np.ones((v.size, 1)), -v)


@pytest.fixture
def toy036():
    return gradient_toy([0.0, 3.0, 6.0])


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
