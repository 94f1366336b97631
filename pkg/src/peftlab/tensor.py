"""Dense float64 tensors with a reverse-mode gradient tape.

Broadcasting is deliberately narrow: an operand of ``add``/``mul`` may be a
Python scalar, a tensor of identical shape, or a vector matching the trailing
axis (per-row bias / gain). Anything else is a :class:`DimensionError`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GradientError",
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "add",
    "mul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "sum",
    "mean",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "masked_fill",
    "softmax",
    "log_softmax",
    "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can record how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        """Wrap ``data`` as the output of a differentiable operation.

        ``backward`` maps the output gradient to one gradient (or ``None``) per
        parent. Recording is skipped when no parent needs a gradient or when
        grad mode is off.
        """
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
class Tape:
    """Topologically ordered record of the operations behind one root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(position[id(p)] < position[id(n)] for n in self.nodes for p in n._parents)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The recorded graph is released afterwards, so a second call on the same
    loss is a no-op for intermediate nodes.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic with restricted broadcasting
# ---------------------------------------------------------------------------
def _broadcast_kind(a: Tensor, b: Tensor, opname: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row"
    raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b_is_tensor = isinstance(b, Tensor)
    b = _as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    kind = _broadcast_kind(a, b, "add")
    bdata = b.data.reshape(()) if kind == "scalar" else b.data
    out = a.data + bdata

    def _back(g):
        return g, (_reduce_to(g, kind, b.shape) if b_is_tensor else None)

    return Tensor.from_op(out, (a, b), _back, "add")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    kind = _broadcast_kind(a, b, "mul")
    bdata = b.data.reshape(()) if kind == "scalar" else b.data
    adata = a.data
    out = adata * bdata

    def _back(g):
        ga = g * bdata
        gb = _reduce_to(g * adata, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), _back, "mul")


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    adata, bdata = a.data, b.data

    def _back(g):
        ga = g @ bdata.T if a.requires_grad else None
        gb = adata.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(adata @ bdata, (a, b), _back, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor.from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return Tensor.from_op(out.copy(), (a,), lambda g: (g.reshape(src),), "reshape")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    src = a.shape

    def _back(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(np.array(out), (a,), _back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, _back, "concat")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a matrix (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {table.shape}")
    n = table.shape[0]

    def _back(g):
        full = np.zeros(table.shape)
        np.add.at(full, idx, g)
        return (full,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    return Tensor.from_op(table.data[idx], (table,), _back, "take_rows")


# ---------------------------------------------------------------------------
# Reductions and pointwise functions
# ---------------------------------------------------------------------------
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)
    src = a.shape

    def _back(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Tensor.from_op(np.asarray(out), (a,), _back, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return Tensor.from_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by a constant."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"masked_fill: mask {keep.shape} vs tensor {a.shape}")
    out = np.where(keep, a.data, value)
    return Tensor.from_op(out, (a,), lambda g: (np.where(keep, g, 0.0),), "masked_fill")


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), _back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), _back, "log_softmax")


def cross_entropy(logits: Tensor, targets: Iterable[int], mask: Iterable[bool] | None = None) -> Tensor:
    """Mean negative log-likelihood over the positions selected by ``mask``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, vocab) logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(list(targets), dtype=np.int64)
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(list(mask), dtype=bool)
    if t.shape != (n,) or m.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but {t.size} targets / {m.size} mask entries")
    if not m.any():
        raise ValueError("cross_entropy: mask selects no positions")
    if t[m].min() < 0 or t[m].max() >= v:
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    rows = np.nonzero(m)[0]
    k = rows.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse[rows] - z[rows, t[rows]]
    loss = nll.sum() / k

    def _back(g):
        grad = np.zeros((n, v))
        p = np.exp(z[rows] - lse[rows, None])
        p[np.arange(k), t[rows]] -= 1.0
        grad[rows] = p * (float(g) / k)
        return (grad,)

    return Tensor.from_op(np.asarray(loss), (logits,), _back, "cross_entropy")
