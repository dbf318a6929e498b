"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations on tensors that require gradients are appended to the active
:class:`Tape`.  Vector-Jacobian products are themselves written with tensor
operations, so a backward pass run with ``create_graph=True`` is recorded on
the tape and can be differentiated again.  The unrolled solver relies on this:
it takes the gradient of the variational cost inside the graph and the
training loss is then differentiated through those gradients.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _recording() -> bool:
    return getattr(_local, "paused", 0) == 0


@contextlib.contextmanager
def no_record():
    """Evaluate tensor operations without appending them to any tape."""
    _local.paused = getattr(_local, "paused", 0) + 1
    try:
        yield
    finally:
        _local.paused -= 1


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass(eq=False)
class Node:
    index: int
    out: "Tensor"
    parents: tuple
    vjp: Callable
    name: str


@dataclass(eq=False)
class Tape:
    """Flat, ordered record of primitive operations.

    Use as a context manager; operations are recorded on the innermost active
    tape.  Because nodes are appended as they are created, list order is a
    topological order.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Immutable real tensor.  ``requires_grad`` marks differentiable leaves."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._node = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.ones(t.shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros(t.shape))


def make_op(name: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a primitive result, recording it when any parent is tracked.

    ``vjp(g, needs)`` receives the upstream gradient tensor and a tuple of
    flags telling which parents need a gradient; it returns one tensor (or
    None) per parent.
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by {name}")
    t = Tensor._wrap(out)
    if _recording() and any(p.requires_grad for p in parents):
        tape = current_tape()
        if tape is not None:
            t.requires_grad = True
            node = Node(len(tape.nodes), t, tuple(parents), vjp, name)
            tape.nodes.append(node)
            t._node = (tape, node)
    return t


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise DimensionError(f"cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1
    )
    r = a.sum(axis=axes, keepdims=True) if axes else a
    return r.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def vjp(g, needs):
        return (broadcast_to(g, a.shape),)

    return make_op("sum_to", _sum_to_array(a.data, shape), (a,), vjp)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g, needs):
        return (sum_to(g, a.shape),)

    return make_op("broadcast_to", out, (a,), vjp)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def vjp(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return make_op("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def vjp(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return make_op("sub", a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def vjp(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return make_op("mul", a.data * b.data, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = None

    def vjp(g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = make_op("tanh", y, (a,), vjp)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable logistic
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = None

    def vjp(g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = make_op("sigmoid", y, (a,), vjp)
    return out


def exp(a: Tensor) -> Tensor:
    out = None

    def vjp(g, needs):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        val = np.exp(a.data)
    out = make_op("exp", val, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * a.ndim
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return make_op("sum", out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_op("reshape", out.copy(), (a,), lambda g, needs: (reshape(g, a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g, needs):
        return (index_put(g, idx, a.shape),)

    return make_op("getitem", np.array(out), (a,), vjp)


def index_put(g: Tensor, idx, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``g`` written at ``idx`` (adjoint of slicing)."""
    out = np.zeros(shape)
    out[idx] = g.data

    def vjp(u, needs):
        return (getitem(u, idx),)

    return make_op("index_put", out, (g,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            res.append(getitem(g, tuple(sl)))
        return tuple(res)

    return make_op("concat", out, tuple(tensors), vjp)


def inner(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


def sumsq(a: Tensor) -> Tensor:
    return tsum(mul(a, a))


# ---------------------------------------------------------------------------
# reverse pass


def _node_of(t: Tensor, tape: Tape):
    if t._node is None:
        return None
    owner, node = t._node
    return node if owner is tape else None


def grad(
    root: Tensor,
    wrt: Sequence[Tensor],
    tape: Tape | None = None,
    create_graph: bool = False,
) -> list:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Only nodes lying on a path from ``wrt`` to ``root`` are visited.  Tensors
    that ``root`` does not depend on receive zeros.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
    wrt = list(wrt)
    if tape is None:
        tape = root._node[0] if root._node is not None else current_tape()
    root_node = _node_of(root, tape) if tape is not None else None

    seeds = {id(w) for w in wrt}
    if root_node is None:
        if id(root) in seeds:
            return [ones_like(w) if w is root else zeros_like(w) for w in wrt]
        if not any(w.requires_grad for w in wrt) or not root.requires_grad:
            return [zeros_like(w) for w in wrt]
        raise ContractError("backward root was not produced on the given tape")

    start = root_node.index + 1
    for w in wrt:
        n = _node_of(w, tape)
        start = min(start, n.index if n is not None else 0)

    nodes = tape.nodes
    depends = set(seeds)
    active = []
    for i in range(start, root_node.index + 1):
        node = nodes[i]
        if any(id(p) in depends for p in node.parents):
            depends.add(id(node.out))
            active.append(node)

    grads = _reverse(root, active, depends, create_graph)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(zeros_like(w) if g is None else g)
    return out


def _reverse(root: Tensor, active: list, depends: set, create_graph: bool) -> dict:
    grads: dict = {id(root): ones_like(root)}
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        for node in reversed(active):
            g = grads.get(id(node.out))
            if g is None:
                continue
            needs = tuple(id(p) in depends for p in node.parents)
            pgrads = node.vjp(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return grads


def backward(
    root: Tensor,
    tape: Tape,
    params: Iterable[Tensor] | None = None,
    create_graph: bool = False,
) -> dict:
    """Gradient map ``{tensor: gradient}``.

    With ``params`` given, every listed tensor gets an entry (zeros when
    untouched).  Otherwise every tracked leaf reachable from ``root`` does.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
    if params is not None:
        params = list(params)
        return dict(zip(params, grad(root, params, tape, create_graph)))
    root_node = _node_of(root, tape)
    if root_node is None:
        raise ContractError("backward root was not produced on the given tape")
    leaves: dict = {}
    for node in tape.nodes[: root_node.index + 1]:
        for p in node.parents:
            if p.requires_grad and p._node is None:
                leaves.setdefault(id(p), p)
    leaf_list = list(leaves.values())
    return dict(zip(leaf_list, grad(root, leaf_list, tape, create_graph)))
