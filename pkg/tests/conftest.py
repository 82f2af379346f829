import numpy as np
import pytest

from convemo import tensor as T


def numeric_grad(fn, x, h=1e-5):
    """Central differences of scalar ``fn(x)`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a) + np.abs(b)))


def taped_grads(build, arrays):
    """Analytic gradients of scalar ``build(vars)`` for each array."""
    tape = T.Tape()
    vs = [tape.watch(a, name=f"x{i}") for i, a in enumerate(arrays)]
    store = tape.backward(build(vs))
    return [store[f"x{i}"] for i in range(len(arrays))]


def untaped_value(build, arrays):
    return float(build([T.Var(a) for a in arrays]).value[0, 0])


def check_all(build, arrays, tol):
    """Assert analytic vs central-difference gradients for every input array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = taped_grads(build, arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return untaped_value(build, args)
        num = numeric_grad(f, a.copy())
        assert rel_err(analytic[i], num) < tol, f"input {i}: rel err {rel_err(analytic[i], num):.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns the flag."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
