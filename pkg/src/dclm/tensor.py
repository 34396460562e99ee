"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`).  Outside a tape nothing is recorded, which is
the fast path used for inference and finite-difference checks.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """A real-valued array plus an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "name", "tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


_local = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations for one forward pass.

    Use as a context manager; call :meth:`backward` once on a scalar loss.
    The recorded graph is dropped after the backward sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, inputs, outputs, backward) -> None:
        self.nodes.append(_Node(inputs, outputs, backward))
        for out in outputs:
            out.tape = self

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        produced = set()
        for node in self.nodes:
            for out in node.outputs:
                produced.add(id(out))
        for node in reversed(self.nodes):
            out_grads = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [np.zeros_like(o.values) if g is None else g
                         for o, g in zip(node.outputs, out_grads)]
            in_grads = node.backward(out_grads)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = g if prev is None else prev + g
                elif inp.requires_grad:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
        self.clear()

    def clear(self) -> None:
        for node in self.nodes:
            for out in node.outputs:
                out.tape = None
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor's ``grad``."""
    if loss.tape is None:
        raise ShapeError("loss is not connected to a gradient tape")
    loss.tape.backward(loss)


def _record(inputs: Sequence, outputs: Sequence[Tensor], fn: Callable) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(list(inputs), list(outputs), fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.values + b.values)
    _record([a, b], [out], lambda g: [_unbroadcast(g[0], a.shape),
                                      _unbroadcast(g[0], b.shape)])
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    out = Tensor(av * bv)
    _record([a, b], [out], lambda g: [_unbroadcast(g[0] * bv, a.shape),
                                      _unbroadcast(g[0] * av, b.shape)])
    return out


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors are rows/columns as numpy)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = Tensor(av @ bv)

    def back(g):
        g = g[0]
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return [ga, gb]

    _record([a, b], [out], back)
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        vals = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    out = Tensor(vals)
    ax = axis % vals.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return np.split(g[0], bounds, axis=ax)

    _record(ts, [out], back)
    return out


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        vals = np.stack([t.values for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    out = Tensor(vals)
    ax = axis % vals.ndim

    def back(g):
        return [np.take(g[0], i, axis=ax) for i in range(len(ts))]

    _record(ts, [out], back)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor(a.values.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    _record([a], [out], lambda g: [g[0].reshape(a.shape)])
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_values(a.values)
    out = Tensor(s)
    _record([a], [out], lambda g: [g[0] * s * (1.0 - s)])
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.values)
    out = Tensor(t)
    _record([a], [out], lambda g: [g[0] * (1.0 - t * t)])
    return out


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.sum(axis=axis))

    def back(g):
        gg = g[0]
        if axis is not None:
            gg = np.expand_dims(gg, axis)
        return [np.broadcast_to(gg, a.shape).copy()]

    _record([a], [out], back)
    return out


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        vals = a.values[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {a.shape}") from None
    out = Tensor(np.array(vals, copy=True))

    def back(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, index, g[0])
        return [ga]

    _record([a], [out], back)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    out = Tensor(table.values[ids])

    def back(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g[0].reshape(-1, table.shape[1]))
        return [gt]

    _record([table], [out], back)
    return out


def embedding_bag(table: Tensor, ids, weights) -> Tensor:
    """Weighted sum of table rows per batch row: ``out[b] = sum_l w[b,l] table[ids[b,l]]``."""
    ids = np.asarray(ids, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if ids.shape != weights.shape or ids.ndim != 2:
        raise ShapeError(f"embedding_bag: ids {ids.shape} vs weights {weights.shape}")
    out = Tensor(np.einsum("bl,ble->be", weights, table.values[ids]))

    def back(g):
        gt = np.zeros_like(table.values)
        contrib = weights[:, :, None] * g[0][:, None, :]
        np.add.at(gt, ids.reshape(-1), contrib.reshape(-1, table.shape[1]))
        return [gt]

    _record([table], [out], back)
    return out
