"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

The tape is define-by-run and thread-local: each thread of execution owns
one tape, so independent runs can execute in parallel without sharing
mutable state.  Everything is float64; there is no device abstraction.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "backward",
    "tape_size",
    "clear_tape",
    "exp",
    "log",
    "square",
    "sqrt",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "softplus",
    "absolute",
    "maximum",
    "minimum",
    "broadcast_to",
    "matmul",
    "bmv",
    "concat",
    "softmax",
    "amax",
    "amin",
    "take_along",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_state = threading.local()


def _tls():
    if not hasattr(_state, "nodes"):
        _state.nodes = []
        _state.grad_mode = True
    return _state


def tape_size() -> int:
    """Number of operation nodes currently recorded on this thread's tape."""
    return len(_tls().nodes)


def clear_tape() -> None:
    """Drop all recorded nodes.  Leaf tensors and their grads are untouched."""
    _tls().nodes.clear()


def grad_enabled() -> bool:
    """Whether operations currently record onto the tape."""
    return _tls().grad_mode


@contextmanager
def no_grad():
    """Suppress gradient recording for the enclosed block.

    Tensors produced inside carry no tape history and have
    ``grad_enabled=False``; the tape length is unchanged by the body.
    Nesting is idempotent.
    """
    st = _tls()
    prev = st.grad_mode
    st.grad_mode = False
    try:
        yield
    finally:
        st.grad_mode = prev


class Tensor:
    """An n-d float64 array, optionally participating in the gradient tape.

    ``grad`` is populated (accumulated) on grad-enabled *leaf* tensors by
    :func:`backward`; intermediate results receive transient cotangents only.
    """

    __slots__ = ("data", "grad", "grad_enabled", "_from_op")

    def __init__(self, data, grad_enabled: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        # Creation inside no_grad always yields a constant.
        self.grad_enabled = bool(grad_enabled) and _tls().grad_mode
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        """A detached copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Constant view of the same data (no copy, no tape history)."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.grad_enabled = False
        out._from_op = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # ---- arithmetic -------------------------------------------------

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return _sub(_as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    # ---- shape / reductions -----------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self) -> "Tensor":
        return _transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return _sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return _mean(self, axis)

    def __repr__(self):
        flag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result; record a tape node when gradients are live."""
    st = _tls()
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.grad = None
    out._from_op = True
    if st.grad_mode and any(t.grad_enabled for t in inputs):
        out.grad_enabled = True
        st.nodes.append(_Node(inputs, out, backward_fn))
    else:
        out.grad_enabled = False
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "subtract")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "divide")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError(
            f"divide: denominator of shape {b.shape} contains zero entries"
        )
    out_data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out_data / b.data, b.shape)
        return ga, gb

    return _make(out_data, (a, b), bwd)


def _neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * x * g,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g / (2.0 * y),))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return _make(y, (a,), lambda g: (g * _sigmoid_stable(x),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max with a scalar constant."""
    x = a.data
    return _make(np.maximum(x, c), (a,), lambda g: (g * (x > c),))


def minimum(a: Tensor, c: float) -> Tensor:
    """Elementwise min with a scalar constant."""
    x = a.data
    return _make(np.minimum(x, c), (a,), lambda g: (g * (x < c),))


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Materialize a broadcast view; gradient sums over the broadcast axes."""
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    old = a.shape
    return _make(data.copy(), (a,), lambda g: (_unbroadcast(g, old),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    need_a, need_b = a.grad_enabled, b.grad_enabled
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if need_a else None
        gb = ad.T @ g if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), bwd)


def bmv(a: Tensor, x: Tensor) -> Tensor:
    """Batched matrix-vector product: [..., n, v] x [..., v] -> [..., n]."""
    if a.ndim < 2 or x.ndim < 1 or a.shape[-1] != x.shape[-1]:
        raise ShapeError(f"bmv: incompatible shapes {a.shape} and {x.shape}")
    out = np.einsum("...nv,...v->...n", a.data, x.data)

    def bwd(g):
        ga = _unbroadcast(np.einsum("...n,...v->...nv", g, x.data), a.shape)
        gx = _unbroadcast(np.einsum("...nv,...n->...v", a.data, g), x.shape)
        return ga, gx

    return _make(out, (a, x), bwd)


def _transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def _reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None
    return _make(np.ascontiguousarray(data), (a,), lambda g: (g.reshape(old),))


def _sum(a: Tensor, axis) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bwd)


def _mean(a: Tensor, axis) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]
    inv = 1.0 / count

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * inv, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis)), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd)


def _getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        buf[index] = g
        return (buf,)

    return _make(np.ascontiguousarray(data), (a,), bwd)


def amax(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax element."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (buf,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def amin(a: Tensor, axis: int) -> Tensor:
    """Min over one axis; gradient routes to the first argmin element."""
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (buf,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather with constant integer indices, `np.take_along_axis` semantics."""
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        mesh = list(np.indices(indices.shape, sparse=True))
        mesh[axis] = indices
        np.add.at(buf, tuple(mesh), g)
        return (buf,)

    return _make(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    x = a.data
    if np.isnan(x).any():
        raise ValueError("softmax: input contains NaN")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dleaf into every grad-enabled leaf reachable from loss.

    Visits tape nodes exactly once, in reverse recording order.  Repeated
    calls without zeroing accumulate into leaf ``grad`` buffers.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.grad_enabled:
        return
    seed = np.ones_like(loss.data)
    if not loss._from_op:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += seed
        return
    cotangents = {id(loss): seed}
    for node in reversed(_tls().nodes):
        g_out = cotangents.pop(id(node.output), None)
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.grad_enabled:
                continue
            if inp._from_op:
                prev = cotangents.get(id(inp))
                cotangents[id(inp)] = g if prev is None else prev + g
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += g
