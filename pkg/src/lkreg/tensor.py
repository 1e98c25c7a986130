"""Dense tensors with reverse-mode automatic differentiation.

Only the operator set needed by the registration networks and losses is
provided. Every op records its parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` replays the recorded
ops in reverse recording order and then releases the graph.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_op_counter = itertools.count()
_state = {"debug": False}
# recording on/off is per thread so no_grad() in an evaluation worker
# cannot switch it off for the training thread
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled()


def set_debug(flag: bool) -> None:
    """In debug mode every forward op checks its output for NaN/Inf."""
    _state["debug"] = bool(flag)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-d float array with an optional gradient buffer.

    Layout is (batch, channel, spatial...) with the last axis fastest, which
    is simply numpy's C order.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_op", "_released")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_op_counter)
        self._op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; record it if grad mode is on and any parent needs grad.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_op_counter)
    out._op = op
    out._released = False
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if exponent == 2:
        out = xd * xd
        return make_op(out, (x,), lambda g: (2.0 * g * xd,), "square")
    out = xd ** exponent
    return make_op(out, (x,), lambda g: (exponent * g * xd ** (exponent - 1),), "pow")


def _slope_factor(pos: np.ndarray, a, dtype) -> np.ndarray:
    """1 where ``pos`` else ``a``, exactly; much faster than np.where with scalar branches."""
    f = (~pos).astype(dtype)
    f *= a
    f += pos
    return f


def leaky_relu(x: Tensor, slope: Union[float, Tensor] = 0.2) -> Tensor:
    """max-style leaky ReLU; x == 0 takes the negative-side slope.

    ``slope`` may be a scalar Tensor, which makes this a learnable (PReLU)
    activation.
    """
    x = as_tensor(x)
    xd = x.data
    pos = xd > 0
    if isinstance(slope, Tensor):
        a = slope.data.reshape(())
        factor = _slope_factor(pos, a.astype(xd.dtype), xd.dtype)
        out = xd * factor

        def bw(g):
            ga = np.asarray((g * np.minimum(xd, 0)).sum(), dtype=slope.dtype).reshape(slope.shape)
            return g * factor, ga

        return make_op(out, (x, slope), bw, "prelu")
    a = xd.dtype.type(slope)
    factor = _slope_factor(pos, a, xd.dtype)
    out = xd * factor
    return make_op(out, (x,), lambda g: (g * factor,), "leaky_relu")


# -- reductions / shape ops -----------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing with scatter backward."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_op(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _box_sum_array(x: np.ndarray, window: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    out = x
    for w, ax in zip(window, axes):
        r = w // 2
        pad = [(0, 0)] * out.ndim
        pad[ax] = (r + 1, r)
        c = np.cumsum(np.pad(out, pad), axis=ax)
        n = out.shape[ax]
        hi = [slice(None)] * out.ndim
        lo = [slice(None)] * out.ndim
        hi[ax] = slice(w, w + n)
        lo[ax] = slice(0, n)
        out = c[tuple(hi)] - c[tuple(lo)]
    return out


def box_sum(x: Tensor, window: Sequence[int]) -> Tensor:
    """Sum over a centred odd window on the spatial axes, zero padded.

    The operator is symmetric, so its adjoint is itself.
    """
    x = as_tensor(x)
    window = tuple(int(w) for w in window)
    nsp = len(window)
    axes = tuple(range(x.ndim - nsp, x.ndim))
    if any(w % 2 == 0 for w in window):
        raise ShapeError(f"box_sum window must be odd, got {window}")
    out = _box_sum_array(x.data, window, axes)
    return make_op(out, (x,), lambda g: (_box_sum_array(g, window, axes),), "box_sum")


# -- backward -----------------------------------------------------------------
def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    # reverse recording order
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls on different graphs. The graph
    is released afterwards; calling backward on it again raises UsageError.
    """
    if loss._released:
        raise UsageError("backward called twice on the same graph; re-run the forward pass")
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    nodes = _collect(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                g = g.astype(node.dtype, copy=False).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
