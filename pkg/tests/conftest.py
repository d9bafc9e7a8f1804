import numpy as np
import pytest

from moile import numcore as nc


def finite_difference(f, arrays, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to each array,
    perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def grad_check(build, shapes, rng, eps=1e-6, positive=False):
    """Compare tape gradients of ``build(*tensors) -> scalar`` against
    finite differences. Returns the worst relative error."""
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    params = [nc.parameter(a) for a in arrays]
    with nc.Tape() as tape:
        loss = build(*params)
    grads = nc.backward(tape, loss)

    def f():
        return float(build(*[nc.constant(p.data) for p in params]).data)

    fd = finite_difference(f, [p.data for p in params], eps)
    return max(rel_err(grads.get(p, np.zeros_like(p.data)), g) for p, g in zip(params, fd))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
