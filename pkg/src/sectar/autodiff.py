"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation performed on tensors attached to it.
Tensors without a tape are constants: operations on them compute values and
record nothing, which is how inference (planning, rollouts) runs.

    tape = Tape()
    p = tape.leaves(params)
    loss = ((x @ p["w"]) - y).square().mean()
    grads = backward(tape, loss)
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class Node:
    __slots__ = ("op", "parents", "vjp", "name", "shape")

    def __init__(self, op: str, parents: tuple, vjp: Callable | None,
                 name: str | None = None, shape: tuple | None = None):
        self.op = op
        self.parents = parents  # tuple of (operand position, node index)
        self.vjp = vjp
        self.name = name
        self.shape = shape


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaf_index: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, name: str) -> "Tensor":
        if name in self.leaf_index:
            raise ValueError(f"leaf {name!r} already registered on this tape")
        arr = np.asarray(value, dtype=DTYPE)
        idx = self._append(Node("leaf", (), None, name, arr.shape))
        self.leaf_index[name] = idx
        return Tensor(arr, self, idx)

    def leaves(self, params: Mapping[str, np.ndarray]) -> dict[str, "Tensor"]:
        return {name: self.leaf(v, name) for name, v in params.items()}


class Tensor:
    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape | None = None, index: int = -1):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE else np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {where})"

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)
    def square(self): return square(self)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(op: str, operands: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
            tape = t.tape
    return tape


def _record(op: str, value: np.ndarray, operands: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.isfinite(value).all():
        shapes = ", ".join(str(t.shape) for t in operands)
        raise FloatingPointError(f"{op}: non-finite result for operand shapes {shapes}")
    tape = _tape_of(op, operands)
    if tape is None:
        return Tensor(value)
    parents = tuple((pos, t.index) for pos, t in enumerate(operands) if t.tape is tape)
    idx = tape._append(Node(op, parents, vjp))
    return Tensor(value, tape, idx)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    need_a, need_b = a.tape is not None, b.tape is not None
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape) if need_a else None,
                              _unbroadcast(g * av, bv.shape) if need_b else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    av, bv = a.value, b.value
    pick_a = av <= bv
    return _record("minimum", np.where(pick_a, av, bv), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                              _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {av.shape} @ {bv.shape}")

    need_a, need_b = a.tape is not None, b.tape is not None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if need_a else None
        if not need_b:
            gb = None
        elif bv.ndim == 2 and av.ndim > 2:
            # fold batch dims instead of materialising one weight gradient per batch entry
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", av @ bv, (a, b), vjp)


# -- elementwise unary -------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _record("log", out, (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    av = a.value
    inside = (av > lo) & (av < hi)
    return _record("clip", np.clip(av, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


# -- reductions and structure -----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.sum(a.value, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g) if _needs_add_at(key) else full.__setitem__(key, g)
        return (full,)

    return _record("slice", a.value[key], (a,), vjp)


def _needs_add_at(key) -> bool:
    # fancy (array) indexing may repeat indices; basic slicing never does
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"stack: shape mismatch {[t.shape for t in ts]}") from None
    n = len(ts)
    return _record("stack", out, ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _record("log_softmax", out, (a,),
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


# -- backward ----------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf registered on ``tape``.

    Leaves the loss does not depend on get zero arrays of their own shape.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: list = [None] * len(tape.nodes)
    if loss.tape is tape:
        grads[loss.index] = np.ones(loss.shape, dtype=DTYPE)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = tape.nodes[i]
            if node.vjp is None:
                continue
            outs = node.vjp(g)
            for pos, parent in node.parents:
                pg = outs[pos]
                if pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
            grads[i] = None
    elif loss.tape is not None:
        raise ValueError("backward: loss was recorded on a different tape")
    out = {}
    for name, idx in tape.leaf_index.items():
        g = grads[idx]
        out[name] = np.zeros(tape.nodes[idx].shape, dtype=DTYPE) if g is None else np.array(g, dtype=DTYPE)
    return out
