""" Dense tensors with reverse-mode differentiation. Every differentiable computation goes through here. """
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from data_object_model.errors import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    EmptySetError,
    IndexOutOfRangeError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], None]

DTYPE = np.float64

_tape_ids = itertools.count()
_recording = threading.local()


def _is_recording() -> bool:
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run a block without recording operations on the tape (evaluation, cached embeddings)."""
    previous = _is_recording()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


class DiffValue:
    """
    A dense float64 tensor (rank 0, 1 or 2) that remembers the operation that produced it.

    Leaves created with ``requires_grad=True`` are parameters: they collect gradients across
    every backward pass until ``zero_grad`` is called. Intermediate values get their gradient
    buffer reset at the start of each backward pass.
    """

    __slots__ = ("values", "_grad", "tape_id", "requires_grad", "op", "name", "_parents", "_backward_fn")

    def __init__(
            self,
            values: ArrayLike,
            *,
            requires_grad: bool = False,
            name: Optional[str] = None,
            op: str = "leaf",
            parents: Tuple["DiffValue", ...] = (),
            backward_fn: Optional[BackwardFn] = None):
        array = np.array(values, dtype=DTYPE)
        if array.ndim > 2:
            raise DimensionError("DiffValue", array.shape)
        self.values = array
        self._grad: Optional[np.ndarray] = None
        self.tape_id = next(_tape_ids)
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = parents
        self._backward_fn = backward_fn

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"DiffValue{label}(op={self.op}, shape={list(self.shape)})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def grad(self) -> np.ndarray:
        # lazily allocated
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError("item", self.shape)
        return float(self.values.reshape(-1)[0])

    def _accumulate(self, grad: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(grad, dtype=DTYPE).reshape(self.values.shape)
        else:
            self._grad += grad.reshape(self.values.shape)


def constant(values: ArrayLike) -> DiffValue:
    return values if isinstance(values, DiffValue) else DiffValue(values)


def parameter(values: ArrayLike, name: Optional[str] = None) -> DiffValue:
    return DiffValue(values, requires_grad=True, name=name)


def uniform_parameter(shape: Tuple[int, ...], rng: np.random.Generator, scale: float = 0.1,
                      name: Optional[str] = None) -> DiffValue:
    """Seeded uniform(-scale, scale) initialisation."""
    return parameter(rng.uniform(-scale, scale, size=shape), name=name)


def _make(values: np.ndarray, op: str, parents: Sequence[DiffValue], backward_fn: BackwardFn) -> DiffValue:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked or not _is_recording():
        return DiffValue(values, op=op)
    return DiffValue(values, requires_grad=True, op=op, parents=tracked, backward_fn=backward_fn)


def _send(target: DiffValue, grad: np.ndarray) -> None:
    if target.requires_grad:
        target._accumulate(grad)


# --- Linear algebra ------------------------------------------------------------


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    """
    Matrix product for rank-1/rank-2 operands ([m×k]·[k×n], [k]·[k×n], [m×k]·[k], [k]·[k]).

    A rank-1 left operand behaves as a row vector and a rank-1 right operand as a column
    vector; the corresponding output dimension is dropped, numpy-style.
    """
    a, b = constant(a), constant(b)
    if a.values.ndim not in (1, 2) or b.values.ndim not in (1, 2):
        raise DimensionError("matmul", a.shape, b.shape)
    a2 = a.values.reshape(1, -1) if a.values.ndim == 1 else a.values
    b2 = b.values.reshape(-1, 1) if b.values.ndim == 1 else b.values
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    out = a.values @ b.values

    def backward(grad: np.ndarray) -> None:
        g2 = np.asarray(grad).reshape(a2.shape[0], b2.shape[1])
        _send(a, g2 @ b2.T)
        _send(b, a2.T @ g2)

    return _make(out, "matmul", (a, b), backward)


def transpose(m: DiffValue) -> DiffValue:
    if m.values.ndim != 2:
        raise DimensionError("transpose", m.shape)

    def backward(grad: np.ndarray) -> None:
        _send(m, grad.T)

    return _make(m.values.T.copy(), "transpose", (m,), backward)


def outer_product(h: DiffValue, g: DiffValue) -> DiffValue:
    if h.values.ndim != 1 or g.values.ndim != 1:
        raise DimensionError("outer_product", h.shape, g.shape)

    def backward(grad: np.ndarray) -> None:
        _send(h, grad @ g.values)
        _send(g, h.values @ grad)

    return _make(np.outer(h.values, g.values), "outer_product", (h, g), backward)


def reshape(z: DiffValue, shape: Tuple[int, ...]) -> DiffValue:
    source_shape = z.shape
    try:
        out = z.values.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", source_shape, shape)

    def backward(grad: np.ndarray) -> None:
        _send(z, grad.reshape(source_shape))

    return _make(out.copy(), "reshape", (z,), backward)


def reshape_rowmajor(z: DiffValue) -> DiffValue:
    """Row-major flattening: Z[i][j] lands at index i * q + j."""
    return reshape(z, (z.size,))


def concat(a: DiffValue, b: DiffValue) -> DiffValue:
    """Concatenate along the last axis; rank-2 operands must share their row count."""
    a, b = constant(a), constant(b)
    if a.values.ndim != b.values.ndim or a.values.ndim == 0:
        raise DimensionError("concat", a.shape, b.shape)
    if a.values.ndim == 2 and a.shape[0] != b.shape[0]:
        raise DimensionError("concat", a.shape, b.shape)
    split = a.shape[-1]

    def backward(grad: np.ndarray) -> None:
        _send(a, grad[..., :split])
        _send(b, grad[..., split:])

    return _make(np.concatenate([a.values, b.values], axis=-1), "concat", (a, b), backward)


def stack_rows(vectors: Sequence[DiffValue]) -> DiffValue:
    if not vectors:
        raise EmptySetError("stack_rows needs at least one vector")
    width = vectors[0].shape
    for v in vectors:
        if v.values.ndim != 1 or v.shape != width:
            raise DimensionError("stack_rows", width, v.shape)
    out = np.stack([v.values for v in vectors])

    def backward(grad: np.ndarray) -> None:
        for row, v in enumerate(vectors):
            _send(v, grad[row])

    return _make(out, "stack_rows", tuple(vectors), backward)


def gather_rows(table: DiffValue, ids: Sequence[int]) -> DiffValue:
    """Embedding lookup: row ``ids[i]`` of ``table`` becomes row ``i`` of the output."""
    index = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise DimensionError("gather_rows", table.shape)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexOutOfRangeError(
            f"gather_rows: ids must lie in [0, {table.shape[0]}), got range [{index.min()}, {index.max()}]"
        )

    def backward(grad: np.ndarray) -> None:
        if table.requires_grad:
            np.add.at(table.grad, index, grad)

    return _make(table.values[index], "gather_rows", (table,), backward)


def pick_row(m: DiffValue, row: int) -> DiffValue:
    if m.values.ndim != 2:
        raise DimensionError("pick_row", m.shape)
    if not 0 <= row < m.shape[0]:
        raise IndexOutOfRangeError(f"pick_row: row {row} outside [0, {m.shape[0]})")

    def backward(grad: np.ndarray) -> None:
        if m.requires_grad:
            m.grad[row] += grad

    return _make(m.values[row].copy(), "pick_row", (m,), backward)


def add_bias(m: DiffValue, bias: DiffValue) -> DiffValue:
    """Add a length-d vector to every row of an n×d matrix."""
    if m.values.ndim != 2 or bias.values.ndim != 1 or m.shape[1] != bias.shape[0]:
        raise DimensionError("add_bias", m.shape, bias.shape)

    def backward(grad: np.ndarray) -> None:
        _send(m, grad)
        _send(bias, grad.sum(axis=0))

    return _make(m.values + bias.values, "add_bias", (m, bias), backward)


# --- Elementwise ----------------------------------------------------------------


def _same_shape(op: str, a: DiffValue, b: DiffValue) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = constant(a), constant(b)
    _same_shape("add", a, b)

    def backward(grad: np.ndarray) -> None:
        _send(a, grad)
        _send(b, grad)

    return _make(a.values + b.values, "add", (a, b), backward)


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = constant(a), constant(b)
    _same_shape("sub", a, b)

    def backward(grad: np.ndarray) -> None:
        _send(a, grad)
        _send(b, -grad)

    return _make(a.values - b.values, "sub", (a, b), backward)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    """Elementwise (Hadamard) product of equally shaped operands."""
    a, b = constant(a), constant(b)
    _same_shape("mul", a, b)

    def backward(grad: np.ndarray) -> None:
        _send(a, grad * b.values)
        _send(b, grad * a.values)

    return _make(a.values * b.values, "mul", (a, b), backward)


def mul_scalar(a: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def backward(grad: np.ndarray) -> None:
        _send(a, grad * c)

    return _make(a.values * c, "mul_scalar", (a,), backward)


def relu(x: DiffValue) -> DiffValue:
    mask = x.values > 0

    def backward(grad: np.ndarray) -> None:
        _send(x, grad * mask)

    return _make(np.where(mask, x.values, 0.0), "relu", (x,), backward)


def _stable_sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    positive = u >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-u[positive]))
    exp_u = np.exp(u[~positive])
    out[~positive] = exp_u / (1.0 + exp_u)
    return out


def sigmoid(x: DiffValue) -> DiffValue:
    y = _stable_sigmoid(x.values)

    def backward(grad: np.ndarray) -> None:
        _send(x, grad * y * (1.0 - y))

    return _make(y, "sigmoid", (x,), backward)


def tanh(x: DiffValue) -> DiffValue:
    y = np.tanh(x.values)

    def backward(grad: np.ndarray) -> None:
        _send(x, grad * (1.0 - y * y))

    return _make(y, "tanh", (x,), backward)


def exp(x: DiffValue) -> DiffValue:
    y = np.exp(x.values)

    def backward(grad: np.ndarray) -> None:
        _send(x, grad * y)

    return _make(y, "exp", (x,), backward)


def log(x: DiffValue) -> DiffValue:
    if np.any(x.values <= 0):
        raise DomainError(f"log of non-positive input (min {x.values.min()!r})")

    def backward(grad: np.ndarray) -> None:
        _send(x, grad / x.values)

    return _make(np.log(x.values), "log", (x,), backward)


def softplus(x: DiffValue) -> DiffValue:
    """log(1 + exp(x)) in the overflow-free form max(x, 0) + log1p(exp(-|x|))."""
    v = x.values
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))

    def backward(grad: np.ndarray) -> None:
        _send(x, grad * _stable_sigmoid(v))

    return _make(y, "softplus", (x,), backward)


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul_scalar": mul_scalar,
}


def elementwise(op: str, *args) -> DiffValue:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}, expected one of {sorted(_ELEMENTWISE)}")
    return fn(*args)


# --- Reductions -----------------------------------------------------------------


def sum_all(x: DiffValue) -> DiffValue:
    def backward(grad: np.ndarray) -> None:
        _send(x, np.full_like(x.values, float(grad)))

    return _make(np.array(x.values.sum()), "sum_all", (x,), backward)


def mean_rows(m: DiffValue) -> DiffValue:
    if m.values.ndim != 2:
        raise DimensionError("mean_rows", m.shape)
    k = m.shape[0]
    if k == 0:
        raise EmptySetError("mean_rows over zero rows")

    def backward(grad: np.ndarray) -> None:
        _send(m, np.broadcast_to(grad / k, m.shape))

    return _make(m.values.mean(axis=0), "mean_rows", (m,), backward)


def cosine_similarity(u: DiffValue, v: DiffValue) -> DiffValue:
    if u.values.ndim != 1:
        raise DimensionError("cosine_similarity", u.shape, v.shape)
    _same_shape("cosine_similarity", u, v)
    nu = float(np.linalg.norm(u.values))
    nv = float(np.linalg.norm(v.values))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    cos = float(u.values @ v.values) / (nu * nv)

    def backward(grad: np.ndarray) -> None:
        g = float(grad)
        _send(u, g * (v.values / (nu * nv) - cos * u.values / (nu * nu)))
        _send(v, g * (u.values / (nu * nv) - cos * v.values / (nv * nv)))

    return _make(np.array(cos), "cosine_similarity", (u, v), backward)


def l2_normalize_rows(m: DiffValue) -> DiffValue:
    if m.values.ndim != 2:
        raise DimensionError("l2_normalize_rows", m.shape)
    norms = np.linalg.norm(m.values, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        rows = np.flatnonzero(norms[:, 0] == 0.0).tolist()
        raise DegenerateInputError(f"zero-norm rows {rows} cannot be normalised")
    y = m.values / norms

    def backward(grad: np.ndarray) -> None:
        _send(m, (grad - y * np.sum(grad * y, axis=1, keepdims=True)) / norms)

    return _make(y, "l2_normalize_rows", (m,), backward)


def _softmax_values(s: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    shifted = np.where(mask, -np.inf, s) if mask is not None else s
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(s: DiffValue) -> DiffValue:
    """Softmax over the last axis (row-wise for matrices), max-subtracted."""
    y = _softmax_values(s.values, None)

    def backward(grad: np.ndarray) -> None:
        _send(s, y * (grad - np.sum(grad * y, axis=-1, keepdims=True)))

    return _make(y, "softmax", (s,), backward)


def log_softmax(s: DiffValue, mask: Optional[np.ndarray] = None) -> DiffValue:
    """
    Log-softmax over the last axis. Entries where ``mask`` is True are excluded from the
    normaliser; their output is 0 and they receive no gradient.
    """
    values = s.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise DimensionError("log_softmax", values.shape, mask.shape)
    probs = _softmax_values(values, mask)
    live = values if mask is None else np.where(mask, -np.inf, values)
    top = np.max(live, axis=-1, keepdims=True)
    lse = top + np.log(np.sum(np.exp(live - top), axis=-1, keepdims=True))
    out = values - lse
    if mask is not None:
        out = np.where(mask, 0.0, out)

    def backward(grad: np.ndarray) -> None:
        g = grad if mask is None else np.where(mask, 0.0, grad)
        _send(s, g - probs * np.sum(g, axis=-1, keepdims=True))

    return _make(out, "log_softmax", (s,), backward)


# --- Backward pass --------------------------------------------------------------


def _topological_order(root: DiffValue) -> List[DiffValue]:
    order: List[DiffValue] = []
    visited = set()
    stack: List[Tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.tape_id in visited:
            continue
        visited.add(node.tape_id)
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.tape_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: DiffValue) -> None:
    """
    Propagate d(loss)/d(value) to every reachable leaf.

    Leaf gradients accumulate across calls; intermediate buffers are rebuilt per call.
    """
    if loss.size != 1:
        raise DimensionError("backward (root must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node._grad = None
    loss._accumulate(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward_fn is not None and node._grad is not None:
            node._backward_fn(node._grad)
