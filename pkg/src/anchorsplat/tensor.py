"""Reverse-mode automatic differentiation over float64 numpy arrays.

Training differentiates end to end through feature blending, attention,
spline heads, camera projection, and alpha compositing.  Instead of pulling
in a deep-learning framework for that, this module records a flat tape of
numpy operations and replays it backwards: every primitive stores a
vector-Jacobian product closure, and ``backward`` walks the graph in
reverse topological order.  All arithmetic is float64 so analytic gradients
can be checked tightly against central finite differences.

Externally computed operations (the rasterizer has a hand-derived backward
pass) join the tape through :func:`custom_op`.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

_grad_enabled = contextvars.ContextVar("anchorsplat_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A float64 numpy array plus the tape bookkeeping to differentiate it.

    ``data`` is the value, ``grad`` the accumulated gradient (populated by
    ``backward`` on tensors with ``requires_grad``).  Non-leaf tensors keep
    ``_parents`` and a ``_vjp`` closure mapping the output gradient to one
    gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # Make numpy defer mixed ndarray-Tensor arithmetic to our reflected
    # operators instead of broadcasting into an object array.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward pass --------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf.

        Without an explicit seed this must be a scalar.  Intermediate
        gradients are dropped as soon as they have been consumed.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)

        for node in reversed(_toposort(self)):
            g_out = node.grad
            if g_out is None or node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node.grad = None  # free intermediate buffers early

    # -- operator sugar --------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf: float64 copy of ``data`` with gradients enabled."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering, iterative so deep tapes cannot
    overflow the Python stack."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return _tracked(data, parents, vjp)
    return Tensor(data)


def _tracked(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._vjp = vjp
    return out


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _tracking(*xs) -> bool:
    """Whether an op over these operands must go on the tape.  Ops take the
    closure-free fast path otherwise; loss evaluation is op-count bound, so
    this is the difference between usable and sluggish finite differencing."""
    if not _grad_enabled.get():
        return False
    for x in xs:
        if type(x) is Tensor and x.requires_grad:
            return True
    return False


def custom_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Splice an externally computed result into the tape.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent,
    each matching that parent's shape.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    if not _tracking(a, b):
        return Tensor(_raw(a) + _raw(b))
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _tracked(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    if not _tracking(a, b):
        return Tensor(_raw(a) - _raw(b))
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _tracked(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if not _tracking(a, b):
        return Tensor(_raw(a) * _raw(b))
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _tracked(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    if not _tracking(a, b):
        return Tensor(_raw(a) / _raw(b))
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _tracked(a.data / b.data, (a, b), vjp)


def pow_(a, p: float) -> Tensor:
    p = float(p)
    if not _tracking(a):
        return Tensor(_raw(a) ** p)
    a = as_tensor(a)

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _tracked(a.data**p, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product; both operands must be at least 2-D (batching allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if not _tracking(a, b):
        return Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _tracked(a.data @ b.data, (a, b), vjp)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a) -> Tensor:
    if not _tracking(a):
        return Tensor(np.exp(_raw(a)))
    a = as_tensor(a)
    e = np.exp(a.data)
    return _tracked(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    if not _tracking(a):
        return Tensor(np.log(_raw(a)))
    a = as_tensor(a)
    return _tracked(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    if not _tracking(a):
        return Tensor(np.sqrt(_raw(a)))
    a = as_tensor(a)
    s = np.sqrt(a.data)

    def vjp(g):
        # Subgradient 0 at exactly zero input keeps losses finite there.
        d = np.zeros_like(s)
        nz = s > 0.0
        d[nz] = 0.5 / s[nz]
        return (g * d,)

    return _tracked(s, (a,), vjp)


def tanh(a) -> Tensor:
    if not _tracking(a):
        return Tensor(np.tanh(_raw(a)))
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _tracked(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Tensor:
    if not _tracking(a):
        return Tensor(1.0 / (1.0 + np.exp(-_raw(a))))
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _tracked(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    if not _tracking(a):
        x = _raw(a)
        return Tensor(x * (1.0 / (1.0 + np.exp(-x))))
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _tracked(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def absolute(a) -> Tensor:
    if not _tracking(a):
        return Tensor(np.abs(_raw(a)))
    a = as_tensor(a)
    return _tracked(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes wherever the input lies inside [lo, hi]."""
    if not _tracking(a):
        return Tensor(np.clip(_raw(a), lo, hi))
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi
        return (g * inside,)

    return _tracked(out, (a,), vjp)


# -- reductions and shape ops ---------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    if not _tracking(a):
        return Tensor(np.sum(_raw(a), axis=axis, keepdims=keepdims))
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _tracked(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    if not _tracking(a):
        return Tensor(np.reshape(_raw(a), shape))
    a = as_tensor(a)
    old = a.data.shape
    return _tracked(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    if not _tracking(a):
        return Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)
    return _tracked(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key) -> Tensor:
    """Basic indexing (ints, slices, ellipsis); gradient scatters back."""
    if not _tracking(a):
        return Tensor(_raw(a)[key])
    a = as_tensor(a)

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        return (buf,)

    return _tracked(a.data[key], (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (may repeat)."""
    idx = np.asarray(indices)
    if not _tracking(a):
        return Tensor(np.take(_raw(a), idx, axis=axis))
    a = as_tensor(a)
    axis = axis % a.data.ndim

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (slice(None),) * axis + (idx,), g)
        return (buf,)

    return _tracked(np.take(a.data, idx, axis=axis), (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not _tracking(*tensors):
        return Tensor(np.concatenate([_raw(t) for t in tensors], axis=axis))
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _tracked(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not _tracking(*tensors):
        return Tensor(np.stack([_raw(t) for t in tensors], axis=axis))
    ts = [as_tensor(t) for t in tensors]

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(ts)))

    return _tracked(np.stack([t.data for t in ts], axis=axis), tuple(ts), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-shift is detached)."""
    a = as_tensor(a)
    e = exp(a - a.data.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def upsample_zeros(a, out_hw: tuple[int, int]) -> Tensor:
    """Insert zeros between samples on the last two axes (inverse of a
    stride-2 subsample to the given output size)."""
    data = _raw(a)
    h, w = out_hw
    if data.shape[-2] != (h + 1) // 2 or data.shape[-1] != (w + 1) // 2:
        raise ValueError(
            f"upsample target {(h, w)} incompatible with input {data.shape[-2:]}"
        )
    out = np.zeros(data.shape[:-2] + (h, w), dtype=np.float64)
    out[..., ::2, ::2] = data
    if not _tracking(a):
        return Tensor(out)

    def vjp(g):
        return (g[..., ::2, ::2].copy(),)

    return _tracked(out, (as_tensor(a),), vjp)
