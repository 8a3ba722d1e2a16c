import numpy as np
import pytest

from zdcflow import numerics as nx


def fd_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def directional_check(loss_fn, params, seed: int, h: float = 1e-5) -> float:
    """Relative error between the autodiff and finite-difference derivative along a random direction."""
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(p.shape) for p in params]
    loss = loss_fn()
    grads = nx.backward(loss, inputs=params)
    analytic = sum(float(np.sum(grads[p] * d)) for p, d in zip(params, dirs))

    def shifted(s):
        for p, d in zip(params, dirs):
            p.data = p.data + s * d
        with nx.no_grad():
            v = loss_fn().item()
        for p, d in zip(params, dirs):
            p.data = p.data - s * d
        return v

    numeric = (shifted(h) - shifted(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


@pytest.fixture
def f64():
    with nx.float64_mode():
        yield


# acceptance lines are collected here and repeated at the end of the run so
# they survive pytest's output capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
