"""Small dense-tensor engine with reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` is appended to
the active :class:`Tape`.  Calling :meth:`Tape.backward` walks the record in
reverse and accumulates adjoints into the leaves.

    >>> tape = Tape()
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with tape:
    ...     loss = sum_(sin(x))
    >>> grads = tape.backward(loss)
    >>> x.grad.shape
    (2,)

Broadcasting is limited to what the attention model needs: elementwise
``add``/``mul`` follow numpy rules and the adjoint is summed back to the
input shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "TapeStateError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "concat",
    "stack_last",
    "reshape",
    "transpose_last",
    "index",
    "gather_rows",
    "sin",
    "cos",
    "exp",
    "log",
    "relu",
    "softplus",
    "softmax_rows",
    "log_softmax_rows",
    "sum_",
    "mean",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeStateError(RuntimeError):
    """The tape was used in a way its lifecycle does not permit."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager to make it the recording target for the current
    thread.  ``backward`` may run once; call :meth:`reset` to clear leaf
    gradients and allow another pass over the same record.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable) -> None:
        if self._done:
            raise TapeStateError("cannot record on a tape that already ran backward")
        self.nodes.append(_Node(out, inputs, adjoint))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(out))

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def reset(self) -> None:
        for t in self._leaves.values():
            t.grad = None
        self._done = False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise TapeStateError("backward already ran on this tape; call reset() first")
        self._done = True
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.adjoint(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = adj.get(id(t))
                adj[id(t)] = gi if prev is None else prev + gi
        for key, leaf in self._leaves.items():
            g = adj.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        return {k: v.grad for k, v in self._leaves.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], adjoint: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if needs:
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, inputs, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared weight)
    or has the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), adjoint)


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a fixed real constant (e.g. ``1/sqrt(d)``)."""
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _emit(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    return _emit(y, (a,), lambda g: (g / (1.0 + np.exp(-x)),))


# ---------------------------------------------------------------- structure


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts:
        if p.data.ndim != ndim or p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise DimensionError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _emit(np.concatenate([p.data for p in parts], axis=ax), parts, adjoint)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def stack_last(parts: Sequence) -> Tensor:
    """Interleave equally-shaped tensors along a new trailing axis, then flatten it.

    ``stack_last([c, s])`` with ``c, s`` of shape ``(..., n)`` yields
    ``(..., 2n)`` ordered ``[c0, s0, c1, s1, ...]``.
    """
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape
    expanded = [reshape(p, lead + (1,)) for p in parts]
    joined = concat(expanded, axis=-1)
    return reshape(joined, lead[:-1] + (lead[-1] * len(parts),))


def index(a, key) -> Tensor:
    """Basic numpy indexing (slices and integers) with a scatter adjoint."""
    a = as_tensor(a)
    shape = a.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return _emit(a.data[key], (a,), adjoint)


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather_rows: ids outside [0, {n})")
    shape = table.shape

    def adjoint(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), adjoint)


# ---------------------------------------------------------------- reductions


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), adjoint)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def adjoint(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (x,), adjoint)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), adjoint)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))
