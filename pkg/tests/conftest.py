import numpy as np
import pytest

from flowseg.autodiff import Tensor, backward, finite_difference_gradient

RTOL = 1e-4
ATOL = 1e-7
EPS = 1e-5


def grad_mismatch(analytic, numeric) -> float:
    """Largest violation of |a - n| <= ATOL + RTOL * max(|a|, |n|); <= 0 means pass."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    bound = ATOL + RTOL * np.maximum(np.abs(a), np.abs(n))
    return float(np.max(np.abs(a - n) - bound)) if a.size else 0.0


def check_gradients(f, tensors) -> float:
    """Run backward on f() and compare every tensor's grad with central differences."""
    for t in tensors:
        t.zero_grad()
    backward(f())
    worst = -np.inf
    for t in tensors:
        fd = finite_difference_gradient(lambda _: f(), t, EPS)
        worst = max(worst, grad_mismatch(t.grad, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Log one acceptance criterion outcome; shown again in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
