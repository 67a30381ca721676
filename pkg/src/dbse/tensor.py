"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records a node
(its parents and a closure that pushes the output gradient back to them).
``backward`` walks the recorded nodes in reverse topological order, sums the
contributions arriving at each node, and then frees the graph.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count(1)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the dimensions that broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward", "op", "_owned")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self._owned = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, *shape: int, requires_grad=False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None
        self._owned = False

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name="") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    # gradients may be shared between nodes; only arrays a node owns are updated in place
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._owned = False
    elif t._owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._owned = True


# -- elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), "div", bw)


# -- elementwise unary ----------------------------------------------------------

def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), "exp", lambda g: _accumulate(a, g * out_data))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make(np.log(a.data), (a,), "log", lambda g: _accumulate(a, g / a.data))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), "tanh", lambda g: _accumulate(a, g * (1.0 - out_data * out_data)))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _stable_sigmoid(a.data)
    return _make(out_data, (a,), "sigmoid", lambda g: _accumulate(a, g * out_data * (1.0 - out_data)))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), "relu", lambda g: _accumulate(a, g * mask))


def square(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data * a.data, (a,), "square", lambda g: _accumulate(a, 2.0 * a.data * g))


# -- reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes) if ndim else ()


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accumulate(a, np.broadcast_to(g, shape))

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=np.float64), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


# -- linear algebra and shape ops -------------------------------------------------

def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or ``(n, k) @ (k, m)``; the right factor is a matrix."""
    a, b = _wrap(a), _wrap(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            k, m = b.shape
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return _make(out_data, (a, b), "matmul", bw)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: _accumulate(a, np.transpose(g, inv)))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out_data, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make(out_data, (a,), "broadcast", lambda g: _accumulate(a, _unbroadcast(g, a.shape)))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def slice_(a, axis: int, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    ax = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of shape {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, stop)
    return index(a, tuple(sl))


def index(a, idx) -> Tensor:
    """Numpy indexing. Integer-array indices may repeat; their gradients add up."""
    a = _wrap(a)
    try:
        out_data = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"index: {exc} for shape {a.shape}") from None
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros(shape)
            a._owned = True
        elif not a._owned:
            a.grad = np.array(a.grad, copy=True)
            a._owned = True
        if fancy:
            np.add.at(a.grad, idx, g)
        else:
            a.grad[idx] += g

    return _make(np.array(out_data, dtype=np.float64), (a,), "index", bw)


def lstm_pointwise(z, c_prev) -> Tensor:
    """Fused LSTM gate arithmetic.

    ``z`` holds the pre-activations ``[i, f, g, o]`` (last axis ``4H``) and
    ``c_prev`` the previous cell state. Returns ``[h, c]`` concatenated on the
    last axis; callers split it with ``slice_``.
    """
    z, c_prev = _wrap(z), _wrap(c_prev)
    H = c_prev.shape[-1]
    if z.shape[-1] != 4 * H or z.shape[:-1] != c_prev.shape[:-1]:
        raise ShapeError(f"lstm_pointwise: incompatible shapes {z.shape} and {c_prev.shape}")
    sg = _stable_sigmoid(z.data)
    i, f, o = sg[..., :H], sg[..., H:2 * H], sg[..., 3 * H:]
    cand = np.tanh(z.data[..., 2 * H:3 * H])
    c = f * c_prev.data + i * cand
    tc = np.tanh(c)
    h = o * tc

    def bw(g):
        gh, gc = g[..., :H], g[..., H:]
        gc = gc + gh * o * (1.0 - tc * tc)
        if z.requires_grad:
            gz = np.empty(z.shape)
            gz[..., :H] = gc * cand * i * (1.0 - i)
            gz[..., H:2 * H] = gc * c_prev.data * f * (1.0 - f)
            gz[..., 2 * H:3 * H] = gc * i * (1.0 - cand * cand)
            gz[..., 3 * H:] = gh * tc * o * (1.0 - o)
            _accumulate(z, gz)
        _accumulate(c_prev, gc * f)

    return _make(np.concatenate([h, c], axis=-1), (z, c_prev), "lstm", bw)


# -- backward ---------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. Returns a
    map ``node_id -> gradient`` for the leaves in ``wrt`` (zeros for leaves
    the loss does not reach) or for every reached leaf when ``wrt`` is None.
    The recorded graph is released afterwards.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    wrt = list(wrt) if wrt is not None else None
    if not loss.requires_grad:
        return {t.node_id: np.zeros(t.shape) for t in wrt} if wrt is not None else {}

    order = _topo_order(loss)
    _accumulate(loss, np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    leaves = [node for node in order if node._backward is None]
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
            node.grad = None
            node._owned = False

    if wrt is None:
        return {t.node_id: t.grad for t in leaves if t.grad is not None}
    return {t.node_id: (t.grad if t.grad is not None else np.zeros(t.shape)) for t in wrt}


# -- finite-difference check ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple | None = None


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` against central differences.

    ``x`` is an array or a list of arrays; ``f`` receives one Tensor per array.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    xs = [np.array(v, dtype=np.float64) for v in (x if isinstance(x, (list, tuple)) else [x])]
    leaves = [Tensor(v.copy(), requires_grad=True) for v in xs]
    out = f(*leaves)
    analytic = backward(out, leaves)
    worst, worst_idx = 0.0, None
    for k, v in enumerate(xs):
        a_grad = analytic[leaves[k].node_id]
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            with no_grad():
                fp = f(*[Tensor(u) for u in xs]).item()
            v[idx] = orig - h
            with no_grad():
                fm = f(*[Tensor(u) for u in xs]).item()
            v[idx] = orig
            num = (fp - fm) / (2 * h)
            a = a_grad[idx]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst:
                worst, worst_idx = rel, (k,) + idx
    return GradCheckReport(worst, worst <= tol, worst_idx)
