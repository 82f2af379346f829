"""Dense float64 kernel with a reverse-mode operation tape.

Matrices are plain 2-D ``numpy.float64`` arrays. Differentiable values are
wrapped in :class:`Var`; every op that touches a taped ``Var`` appends its
backward rule to that tape. Ops on untaped values compute eagerly and record
nothing, which is how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite values or failed numerical checks."""


def as_matrix(x, name: str = "value") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    return m


class Var:
    """A matrix value that may carry a gradient on a tape."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        if isinstance(value, np.ndarray) and value.ndim == 2 and value.dtype == np.float64:
            self.value = value
        else:
            self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, taped={self.tape is not None})"


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


class GradStore:
    """Accumulated gradients keyed by parameter name.

    Accumulation is additive; call :meth:`zero` between optimizer steps.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.grads: dict[str, np.ndarray] = {}
        if params is not None:
            for k, v in params.items():
                self.grads[k] = np.zeros_like(v)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        cur = self.grads.get(name)
        if cur is None:
            self.grads[name] = np.array(grad, dtype=np.float64)
            return
        if cur.shape != grad.shape:
            raise ShapeError(f"gradient for {name!r}: store has {cur.shape}, got {grad.shape}")
        cur += grad

    def merge(self, other: GradStore) -> None:
        for k, g in other.grads.items():
            self.accumulate(k, g)

    def zero(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def keys(self):
        return self.grads.keys()


class Tape:
    """Linear record of backward closures, replayed in reverse."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self.params: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, value, name: str | None = None) -> Var:
        v = Var(value, tape=self, name=name)
        if name is not None:
            if name in self.params:
                raise KeyError(f"parameter {name!r} watched twice")
            self.params[name] = v
        return v

    def watch_all(self, params: dict[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.watch(v, name=k) for k, v in params.items()}

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, out: Var, store: GradStore | None = None) -> GradStore:
        if out.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 scalar output, got {out.shape}")
        out.grad = np.ones((1, 1))
        for fn in reversed(self._records):
            fn()
        if store is None:
            store = GradStore()
        for name, v in self.params.items():
            store.accumulate(name, v.grad if v.grad is not None else np.zeros_like(v.value))
        self._records.clear()
        return store


def _tape_of(*vs: Var) -> Tape | None:
    for v in vs:
        if v.tape is not None:
            return v.tape
    return None


def _acc(v: Var, g: np.ndarray) -> None:
    if v.tape is None:
        return
    v.grad = g if v.grad is None else v.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op: str, a: Var, b: Var) -> None:
    (ar, ac), (br, bc) = a.shape, b.shape
    if (ar == br or ar == 1 or br == 1) and (ac == bc or ac == 1 or bc == 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _result(value: np.ndarray, tape: Tape | None) -> Var:
    out = Var.__new__(Var)
    out.value = value
    out.grad = None
    out.tape = tape
    out.name = None
    return out


# --- structural and linear ops -------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} (inner dims {a.shape[1]} != {b.shape[0]})")
    tape = _tape_of(a, b)
    out = _result(a.value @ b.value, tape)
    if tape is not None:
        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                _acc(a, g @ b.value.T)
            if b.tape is not None:
                _acc(b, a.value.T @ g)
        tape.record(back)
    return out


def add(a: Var, b: Var) -> Var:
    _check_broadcast("add", a, b)
    tape = _tape_of(a, b)
    out = _result(a.value + b.value, tape)
    if tape is not None:
        def back():
            g = out.grad
            if g is None:
                return
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, _unbroadcast(g, b.shape))
        tape.record(back)
    return out


def sub(a: Var, b: Var) -> Var:
    _check_broadcast("sub", a, b)
    tape = _tape_of(a, b)
    out = _result(a.value - b.value, tape)
    if tape is not None:
        def back():
            g = out.grad
            if g is None:
                return
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, -_unbroadcast(g, b.shape))
        tape.record(back)
    return out


def hadamard(a: Var, b: Var) -> Var:
    _check_broadcast("hadamard", a, b)
    tape = _tape_of(a, b)
    out = _result(a.value * b.value, tape)
    if tape is not None:
        def back():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                _acc(a, _unbroadcast(g * b.value, a.shape))
            if b.tape is not None:
                _acc(b, _unbroadcast(g * a.value, b.shape))
        tape.record(back)
    return out


def scale(m: Var, c: float) -> Var:
    tape = m.tape
    out = _result(m.value * c, tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, out.grad * c)
        tape.record(back)
    return out


def complement(m: Var) -> Var:
    """Elementwise ``1 - m``."""
    tape = m.tape
    out = _result(1.0 - m.value, tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, -out.grad)
        tape.record(back)
    return out


def transpose(m: Var) -> Var:
    tape = m.tape
    out = _result(m.value.T, tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, out.grad.T)
        tape.record(back)
    return out


def concat_cols(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ShapeError("concat_cols: no operands")
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ: {[q.shape for q in parts]}")
    tape = _tape_of(*parts)
    out = _result(np.concatenate([p.value for p in parts], axis=1), tape)
    if tape is not None:
        widths = np.cumsum([p.shape[1] for p in parts])[:-1]

        def back():
            if out.grad is None:
                return
            for p, g in zip(parts, np.split(out.grad, widths, axis=1)):
                _acc(p, g)
        tape.record(back)
    return out


def concat_rows(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ShapeError("concat_rows: no operands")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ: {[q.shape for q in parts]}")
    tape = _tape_of(*parts)
    out = _result(np.concatenate([p.value for p in parts], axis=0), tape)
    if tape is not None:
        heights = np.cumsum([p.shape[0] for p in parts])[:-1]

        def back():
            if out.grad is None:
                return
            for p, g in zip(parts, np.split(out.grad, heights, axis=0)):
                _acc(p, g)
        tape.record(back)
    return out


def split_cols(m: Var, widths: Sequence[int]) -> list[Var]:
    if sum(widths) != m.shape[1]:
        raise ShapeError(f"split_cols: widths {list(widths)} do not cover {m.shape}")
    edges = np.cumsum(widths)
    return [cols(m, int(e - w), int(e)) for w, e in zip(widths, edges)]


def split_rows(m: Var, heights: Sequence[int]) -> list[Var]:
    if sum(heights) != m.shape[0]:
        raise ShapeError(f"split_rows: heights {list(heights)} do not cover {m.shape}")
    edges = np.cumsum(heights)
    return [rows(m, int(e - h), int(e)) for h, e in zip(heights, edges)]


def rows(m: Var, start: int, stop: int) -> Var:
    """Row block ``m[start:stop]``."""
    if not 0 <= start < stop <= m.shape[0]:
        raise ShapeError(f"rows: [{start}:{stop}] out of range for {m.shape}")
    tape = m.tape
    out = _result(m.value[start:stop], tape)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(m.value)
            g[start:stop] = out.grad
            _acc(m, g)
        tape.record(back)
    return out


def cols(m: Var, start: int, stop: int) -> Var:
    """Column block ``m[:, start:stop]``."""
    if not 0 <= start < stop <= m.shape[1]:
        raise ShapeError(f"cols: [{start}:{stop}] out of range for {m.shape}")
    tape = m.tape
    out = _result(m.value[:, start:stop], tape)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(m.value)
            g[:, start:stop] = out.grad
            _acc(m, g)
        tape.record(back)
    return out


def take_rows(m: Var, index: Sequence[int]) -> Var:
    """Gather rows by index (a permutation or selection)."""
    idx = np.asarray(index, dtype=np.intp)
    tape = m.tape
    out = _result(m.value[idx], tape)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(m.value)
            np.add.at(g, idx, out.grad)
            _acc(m, g)
        tape.record(back)
    return out


def sum_all(m: Var) -> Var:
    tape = m.tape
    out = _result(np.array([[m.value.sum()]]), tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, np.full_like(m.value, out.grad[0, 0]))
        tape.record(back)
    return out


# --- elementwise nonlinearities ------------------------------------------


def tanh_ew(m: Var) -> Var:
    tape = m.tape
    y = np.tanh(m.value)
    out = _result(y, tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, out.grad * (1.0 - y * y))
        tape.record(back)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_ew(m: Var) -> Var:
    tape = m.tape
    y = _sigmoid(m.value)
    out = _result(y, tape)
    if tape is not None:
        def back():
            if out.grad is not None:
                _acc(m, out.grad * y * (1.0 - y))
        tape.record(back)
    return out


def softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m: Var) -> Var:
    tape = m.tape
    p = softmax_array(m.value)
    out = _result(p, tape)
    if tape is not None:
        def back():
            g = out.grad
            if g is not None:
                _acc(m, p * (g - (g * p).sum(axis=1, keepdims=True)))
        tape.record(back)
    return out


def dropout(m: Var, p: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity when ``rng`` is None or ``p == 0``."""
    if rng is None or p == 0.0:
        return m
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(m.shape) >= p) / (1.0 - p)
    return hadamard(m, Var(mask))


# --- gradient checking ---------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))


@dataclass
class ParamCheck:
    name: str
    shape: tuple[int, int]
    max_rel_error: float
    n_failed: int
    worst_index: tuple[int, int]


@dataclass
class GradCheckReport:
    tol: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.n_failed == 0 for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if c.n_failed]

    def lines(self) -> Iterable[str]:
        for c in self.checks:
            status = "PASS" if c.n_failed == 0 else f"FAIL ({c.n_failed} entries)"
            yield f"{c.name:<16} {str(c.shape):<10} max_rel_err={c.max_rel_error:.3e}  {status}"


def grad_check(
    f: Callable[[list[Var]], Var],
    params: Sequence[np.ndarray],
    tol: float = 1e-6,
    step: float = 1e-5,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central differences.

    ``f`` receives one :class:`Var` per entry of ``params`` and must return a
    1x1 scalar. It is evaluated once on a tape for the analytic gradient and
    twice per parameter entry untaped for the numeric one. Relative error is
    ``|ga - gn| / max(1, |ga| + |gn|)``.
    """
    arrays = [as_matrix(p).copy() for p in params]
    if names is None:
        names = [f"p{i}" for i in range(len(arrays))]
    for n, a in zip(names, arrays):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"parameter {n!r} has non-finite entries")

    def evaluate() -> float:
        return float(f([Var(a) for a in arrays]).value[0, 0])

    base = evaluate()
    if evaluate() != base:
        raise NumericError("function is not deterministic: two identical forward passes differ")

    tape = Tape()
    vs = [tape.watch(a, name=n) for n, a in zip(names, arrays)]
    out = f(vs)
    if float(out.value[0, 0]) != base:
        raise NumericError("taped forward pass disagrees with untaped pass")
    store = tape.backward(out)

    report = GradCheckReport(tol=tol)
    for n, a in zip(names, arrays):
        analytic = store[n]
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            fp = evaluate()
            a[idx] = orig - step
            fm = evaluate()
            a[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * step)
        err = relative_error(analytic, numeric)
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else (0, 0)
        report.checks.append(
            ParamCheck(
                name=n,
                shape=a.shape,
                max_rel_error=float(err.max()) if err.size else 0.0,
                n_failed=int((err > tol).sum()),
                worst_index=(int(worst[0]), int(worst[1])),
            )
        )
    return report


def softmax_cross_entropy(logits: Var, labels: Sequence[int], denom: float | None = None) -> Var:
    """Summed ``-log softmax(logits)[t, y_t]`` divided by ``denom`` (default L).

    The log-probability is clamped at ``log(1e-12)``, mirroring the guard in
    probability-space cross entropy.
    """
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {y.shape} labels")
    if n and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels outside [0, {c})")
    denom = float(n if denom is None else denom)
    p = softmax_array(logits.value)
    picked = np.maximum(p[np.arange(n), y], 1e-12)
    tape = logits.tape
    out = _result(np.array([[-np.log(picked).sum() / denom]]), tape)
    if tape is not None:
        def back():
            if out.grad is None:
                return
            g = p.copy()
            g[np.arange(n), y] -= 1.0
            _acc(logits, g * (out.grad[0, 0] / denom))
        tape.record(back)
    return out
