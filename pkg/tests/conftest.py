import numpy as np
import pytest

from sdl import ndtensor as nt
from sdl.ndtensor import Tensor

GRAD_TOL = 1e-5


def grad_errors(fn, *arrays, h=1e-6):
    """Relative error between tape gradients and central differences for each input."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    nt.backward(fn(*leaves))
    errs = []
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            args = [Tensor(l.data) for l in leaves]
            args[i] = x
            return fn(*args)

        fd = nt.finite_diff_grad(f, Tensor(leaf.data.copy()), h=h).data
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errs.append(nt.relative_error(analytic, fd))
    return errs


def assert_grad_ok(fn, *arrays, tol=GRAD_TOL):
    errs = grad_errors(fn, *arrays)
    assert max(errs) <= tol, errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    nt.get_tape().clear()
    yield
    nt.get_tape().clear()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
