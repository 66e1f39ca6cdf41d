"""Dense float64 tensors with reverse-mode differentiation.

Every tensor produced by an op remembers its parents and a closure that
pushes the output gradient back to them.  ``backward`` walks the graph in
reverse topological order and returns gradients for named leaves.
``grad_check`` is the independent central-difference oracle.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

_COS_EPS = 1e-12
_relu_log: list[np.ndarray] | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "name", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward=None):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    # Nodes that no parameter reaches are plain constants: no graph, no closure.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _require_2d(a, "transpose")

    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.sum() / n), (a,), backward)


def sum_rows(a) -> Tensor:
    """Sum over columns: (r, c) -> (r,)."""
    a = as_tensor(a)
    _require_2d(a, "sum_rows")

    def backward(g):
        _accumulate(a, np.broadcast_to(g[:, None], a.shape))

    return _make(a.data.sum(axis=1), (a,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _relu_log is not None:
        _relu_log.append(x.data > 0)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), backward)


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient where the floor binds."""
    x = as_tensor(x)
    live = x.data > floor
    safe = np.where(live, x.data, floor)

    def backward(g):
        _accumulate(x, np.where(live, g / safe, 0.0))

    return _make(np.log(safe), (x,), backward)


def row_softmax(m, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along each row, stabilised by subtracting the row max.

    ``mask`` (boolean, same shape) restricts each row to the True entries;
    masked entries come out as exact zeros.  Every row needs at least one
    True entry.
    """
    m = as_tensor(m)
    _require_2d(m, "row_softmax")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"row_softmax needs r, c >= 1, got {m.shape}")
    x = m.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _accumulate(m, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _make(y, (m,), backward)


def concat_features(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d(a, "concat_features")
    _require_2d(b, "concat_features")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features row mismatch: {a.shape} vs {b.shape}")
    split = a.shape[1]

    def backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    table = as_tensor(table)
    _require_2d(table, "gather_rows")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _make(table.data[ids], (table,), backward)


def pick(m, cols) -> Tensor:
    """Select ``m[i, cols[i]]`` for every row: (r, c) -> (r,)."""
    m = as_tensor(m)
    _require_2d(m, "pick")
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(m.shape[0])
    if cols.shape != (m.shape[0],):
        raise ShapeError(f"pick needs one column per row, got {cols.shape} for {m.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= m.shape[1]):
        raise IndexError(f"column index out of range for {m.shape[1]} columns")

    def backward(g):
        full = np.zeros(m.shape)
        full[rows, cols] = g
        _accumulate(m, full)

    return _make(m.data[rows, cols], (m,), backward)


def row_normalize(a, eps: float = _COS_EPS) -> Tensor:
    """Scale each row to unit Euclidean norm; rows with norm < eps map to zero."""
    a = as_tensor(a)
    _require_2d(a, "row_normalize")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    live = norms >= eps
    safe = np.where(live, norms, 1.0)
    y = np.where(live, a.data / safe, 0.0)

    def backward(g):
        # d(x/|x|) = (I - y y^T) g / |x|
        proj = g - y * (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, np.where(live, proj / safe, 0.0))

    return _make(y, (a,), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input before its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``; return gradients of named leaves.

    Every named leaf that requires grad and is reachable gets an entry, zero
    if the loss happens not to depend on it numerically.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    if not loss.requires_grad:
        return {}
    loss.grad = np.ones(loss.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for node in order:
        if node.name is not None and node.requires_grad and not node._parents:
            grads[node.name] = node.grad if node.grad is not None else np.zeros(node.shape)
    return grads


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def record_relu_patterns() -> Iterator[list[np.ndarray]]:
    """Collect the active/inactive mask of every relu evaluated in the block."""
    global _relu_log
    previous, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = previous


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int
    excluded: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f: Callable[[dict[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], eps: float = 1e-5) -> GradCheckResult:
    """Compare ``backward`` against central differences on every coordinate.

    ``f`` maps a dict of named tensors to a scalar tensor.  Coordinates whose
    relu activation pattern changes within +-10*eps are skipped and listed in
    ``excluded`` rather than counted as failures.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    analytic = backward(f(leaves))

    def value(name, idx, delta, record=False):
        arrays = dict(base)
        bumped = base[name].copy()
        bumped[idx] += delta
        arrays[name] = bumped
        inputs = {k: Tensor(v) for k, v in arrays.items()}
        if not record:
            return float(f(inputs).data), None
        with record_relu_patterns() as log_:
            out = float(f(inputs).data)
        return out, log_

    worst = 0.0
    per_param: dict[str, float] = {}
    excluded: list[tuple[str, tuple[int, ...]]] = []
    checked = 0
    for name, arr in base.items():
        grad = analytic.get(name, np.zeros(arr.shape))
        param_worst = 0.0
        for idx in np.ndindex(arr.shape):
            _, lo = value(name, idx, -10 * eps, record=True)
            _, hi = value(name, idx, 10 * eps, record=True)
            if len(lo) != len(hi) or any(not np.array_equal(p, q) for p, q in zip(lo, hi)):
                excluded.append((name, idx))
                continue
            plus, _ = value(name, idx, eps)
            minus, _ = value(name, idx, -eps)
            numeric = (plus - minus) / (2 * eps)
            err = relative_error(float(grad[idx]), numeric)
            param_worst = max(param_worst, err)
            checked += 1
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return GradCheckResult(worst, per_param, checked, excluded)
