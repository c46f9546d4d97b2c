"""Reverse-mode differentiation over small dense rank-2 arrays.

Every op records its inputs and a vector-Jacobian product written in terms of
other ops, so a gradient computed with ``create_graph=True`` is itself a graph
node and can be differentiated again (double backward). That single level of
nesting is all the meta-update needs.

Values are float64 numpy arrays of shape ``(rows, cols)``. Row/column
broadcasting of ``(1, c)``, ``(r, 1)`` and ``(1, 1)`` operands is supported;
nothing beyond rank 2.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericOverflowError",
    "UnreachableLeafWarning",
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "grad",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "power",
    "relu",
    "tanh",
    "row_softmax",
    "logsumexp",
    "l2_normalize_rows",
    "pairwise_sq_dist",
    "dot",
    "layernorm_rows",
    "sum_to",
    "broadcast_to",
    "NORM_EPS",
]

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NumericOverflowError(FloatingPointError):
    """An op produced inf or nan."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite output")


class UnreachableLeafWarning(UserWarning):
    """A requested leaf does not influence the loss; its gradient is zero."""


_ids = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_grad():
    """Ops inside this block produce constants (no graph is recorded)."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


class Tensor:
    """A node in the computation graph.

    ``parents`` and ``vjp`` are empty for constants and leaves. ``node_id``
    grows monotonically, so inputs always carry smaller ids than the nodes
    built from them.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "node_id", "op")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), vjp: Callable | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise ShapeError("tensor", arr.shape)
        if arr.size == 0:
            raise ShapeError("tensor", arr.shape)
        self.value = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.node_id = next(_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        kind = "const" if not self.requires_grad else self.op
        return f"Tensor({kind}, shape={self.shape})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(_as_tensor(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(value, requires_grad: bool = True) -> Tensor:
    """A differentiable leaf."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: Sequence[Tensor],
          vjp: Callable[[Tensor], Sequence[Tensor | None]]) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(op)
    live = _recording() and any(p.requires_grad for p in parents)
    if not live:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=tuple(parents), vjp=vjp)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(op: str, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(op, a, b)
    return tuple(out)


def sum_to(x: Tensor, shape: tuple[int, int]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    if x.shape == tuple(shape):
        return x
    r, c = shape
    if r == 1 and x.shape[0] != 1:
        x = sum(x, axis=0)
    if c == 1 and x.shape[1] != 1:
        x = sum(x, axis=1)
    if x.shape != tuple(shape):
        raise ShapeError("sum_to", x.shape, tuple(shape))
    return x


def broadcast_to(x: Tensor, shape: tuple[int, int]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if _broadcast_shape("broadcast_to", x.shape, shape) != shape:
        raise ShapeError("broadcast_to", x.shape, shape)
    src = x.shape
    return _make("broadcast_to", np.broadcast_to(x.value, shape).copy(), (x,),
                 lambda g: (sum_to(g, src),))


# ------------------------------------------------------------------ primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("mul", a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make("scale", a.value * c, (a,), lambda g: (scale(g, c),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make("transpose", a.value.T.copy(), (a,), lambda g: (transpose(g),))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over all entries (``axis=None``, result 1x1), rows (0) or columns (1)."""
    a = _as_tensor(a)
    if axis is None:
        value = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        value = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError("sum", a.shape)
    src = a.shape
    return _make("sum", value, (a,), lambda g: (broadcast_to(g, src),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make("exp", value, (a,), vjp)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a,), lambda g: (mul(g, power(a, -1.0)),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        value = np.power(a.value, p)
    return _make("power", value, (a,),
                 lambda g: (mul(g, scale(power(a, p - 1.0), p)),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient at 0 is 0
    mask = (a.value > 0).astype(np.float64)
    return _make("relu", a.value * mask, (a,), lambda g: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make("tanh", np.tanh(a.value), (a,), vjp)
    return out


# ------------------------------------------------------------------ composites

def dot(a, b) -> Tensor:
    """Frobenius inner product, returned as a 1x1 tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return sum(mul(a, b))


def logsumexp(a, mask=None, axis: int | None = None) -> Tensor:
    """``log(sum(exp(a)))`` over the entries selected by a constant 0/1 mask.

    The shift by the (masked) maximum is a constant, so it does not change
    the gradient.
    """
    a = _as_tensor(a)
    m = np.ones(a.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError("logsumexp", a.shape, m.shape)
    sel = np.where(m > 0, a.value, -np.inf)
    if axis is None:
        if not np.any(m > 0):
            raise ShapeError("logsumexp", a.shape, m.shape)
        shift = np.array([[sel.max()]])
    else:
        shift = sel.max(axis=axis, keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise ShapeError("logsumexp", a.shape, m.shape)
    z = mul(exp(sub(a, shift)), m)
    return add(log(sum(z, axis)), shift)


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shift = a.value.max(axis=1, keepdims=True)
    e = exp(sub(a, shift))
    return mul(e, power(sum(e, axis=1), -1.0))


def l2_normalize_rows(a, eps: float = NORM_EPS) -> Tensor:
    a = _as_tensor(a)
    sq = sum(mul(a, a), axis=1)
    return mul(a, power(add(sq, eps), -0.5))


def pairwise_sq_dist(a) -> Tensor:
    """``D[i, j] = ||a_i - a_j||^2`` for the rows of ``a``."""
    a = _as_tensor(a)
    sq = sum(mul(a, a), axis=1)
    gram = matmul(a, transpose(a))
    return sub(add(sq, transpose(sq)), scale(gram, 2.0))


def layernorm_rows(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    a = _as_tensor(a)
    centred = sub(a, mean(a, axis=1))
    var = mean(mul(centred, centred), axis=1)
    out = mul(centred, power(add(var, eps), -0.5))
    if gain is not None:
        gain = _as_tensor(gain)
        if gain.shape != (1, a.shape[1]):
            raise ShapeError("layernorm_rows", a.shape, gain.shape)
        out = mul(out, gain)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (1, a.shape[1]):
            raise ShapeError("layernorm_rows", a.shape, bias.shape)
        out = add(out, bias)
    return out


# -------------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    # node ids grow with construction order, so sorting by id is topological
    found: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in found:
            continue
        found[node.node_id] = node
        stack.extend(p for p in node.parents if p.requires_grad and p.node_id not in found)
    return [found[k] for k in sorted(found)]


def grad(loss: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned tensors are graph nodes and can be
    differentiated again. A tensor the loss does not depend on gets a zero
    gradient and an ``UnreachableLeafWarning``.
    """
    wrt = list(wrt)
    if loss.shape != (1, 1):
        raise ShapeError("grad (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        warnings.warn("loss does not depend on any differentiable tensor",
                      UnreachableLeafWarning, stacklevel=2)
        return [Tensor(np.zeros(w.shape)) for w in wrt]

    order = _topological(loss)
    grads: dict[int, Tensor] = {loss.node_id: Tensor(np.ones((1, 1)))}
    ctx = _nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(node.node_id)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else add(prev, pg)

    out = []
    missing = False
    for w in wrt:
        g = grads.get(w.node_id) if w.requires_grad else None
        if g is None:
            missing = True
            g = Tensor(np.zeros(w.shape))
        elif not create_graph and g.requires_grad:
            g = g.detach()
        out.append(g)
    if missing:
        warnings.warn("some requested tensors are not reachable from the loss",
                      UnreachableLeafWarning, stacklevel=2)
    return out


@contextmanager
def _nullcontext():
    yield
