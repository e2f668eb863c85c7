import numpy as np
import pytest

from stvis.tensor import Tape, Tensor


def fd_grad(fn, x, eps=1e-5):
    """Central differences of scalar ``fn(x)`` over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = fn(x)
        x[i] = old - eps
        lo = fn(x)
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def autodiff(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out, leaves)
    return [leaf.grad for leaf in leaves]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
