"""Dense tensor with tape-based reverse-mode autodiff.

Feature maps are ``[N, C, H, W]``; parameters may have lower rank (biases,
norm scales). Every differentiable op builds its output through :func:`_node`,
which records the parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` replays those records in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, UsageError

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(kind="double"):
    """Switch the dtype used for newly created tensors and parameters.

    ``"double"`` is the verification mode used by oracle and gradient tests.
    """
    dtypes = {"single": np.float32, "double": np.float64}
    if kind not in dtypes:
        raise ValueError(f"unknown precision {kind!r}")
    prev = default_dtype()
    _state.dtype = dtypes[kind]
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation

class MacCounter:
    """Accumulates MACs reported by primitives while active.

    Convolutions and matmuls report their multiply count; elementwise ops,
    reductions and resampling report one per element. Shape-only ops report 0.
    """

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_macs():
    counters = _get("counters", ())
    c = MacCounter()
    _state.counters = counters + (c,)
    try:
        yield c
    finally:
        _state.counters = counters


def record_macs(op, n):
    for c in _get("counters", ()):
        c.add(op, n)


# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_retain", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._retain = False
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def retain_grad(self):
        """Keep this non-leaf's gradient after :func:`backward`."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, grad=None):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if not isinstance(root, Tensor) or not root.requires_grad:
        raise UsageError("backward() called on a tensor that is not on a tape")
    if grad is None:
        if root.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    record_macs("add", out.size)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data
    record_macs("sub", out.size)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        s = float(b)
        out = a.data * np.asarray(s, dtype=a.dtype)
        record_macs("mul", out.size)
        return _node(out, (a,), lambda g: (g * np.asarray(s, dtype=g.dtype),))
    a, b = _pair(a, b)
    out = a.data * b.data
    record_macs("mul", out.size)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(out, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    record_macs("div", out.size)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _node(out, (a, b), bw)


def exp(x):
    out = np.exp(x.data)
    record_macs("exp", out.size)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    record_macs("log", xd.size)
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    xd = x.data
    record_macs("square", xd.size)
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# shape ops and reductions

def reshape(x, shape):
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return tuple(res)

    return _node(out, tensors, bw)


def split(x, sizes, axis=1):
    """Inverse of :func:`concat` along ``axis``."""
    out, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(lo, lo + n)
        out.append(take_slice(x, tuple(sl)))
        lo += n
    return out


def take_slice(x, index):
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _node(x.data[index], (x,), bw)


def tsum(x, axis=None, keepdims=False):
    xd = x.data
    record_macs("sum", xd.size)
    out = xd.sum(axis=axis, keepdims=keepdims)
    src = xd.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    xd = x.data
    if axis is None:
        n = xd.size
    else:
        ax = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([xd.shape[a] for a in ax]))
    record_macs("mean", xd.size)
    out = xd.mean(axis=axis, keepdims=keepdims)
    src = xd.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _node(np.asarray(out), (x,), bw)


# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched ``a @ b`` over the last two axes (leading axes broadcast)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ContractError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    out = ad @ bd
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    record_macs("matmul", int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), bw)
