"""Small dense-tensor library with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a closure
pushing the output gradient back onto them.  Values are float64 numpy arrays.
A graph may be differentiated once; call :func:`reset_graph` before reusing it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-library failures."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes))


class NumericFault(TensorError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class GraphError(TensorError, RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, reference scoring)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation graph.

    Leaves created by the user carry ``requires_grad``; interior nodes inherit it
    from their parents.  ``grad`` is filled in by :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericFault(f"{op}: non-finite value in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bw, "scalar_mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw, "exp")


def max_with_zero(a: Tensor) -> Tensor:
    """Hinge ``max(0, a)``; the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "max_with_zero")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bw, "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # log σ(x) = min(x, 0) - log1p(exp(-|x|))
    val = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accum(a, g * _sigmoid_np(-x))

    return _make(val, (a,), bw, "log_sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    val = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * d)

    return _make(val, (a,), bw, "gelu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - t * t))

    return _make(t, (a,), bw, "tanh")


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    val = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(val, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError("mean", a.shape, ())
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        val = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(val, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    shapes = {t.shape for t in items}
    if len(shapes) != 1:
        raise ShapeError("stack", *sorted(shapes))

    def bw(g):
        for i, t in enumerate(items):
            _accum(t, g[i])

    return _make(np.stack([t.data for t in items]), tuple(items), bw, "stack")


def index(a: Tensor, idx) -> Tensor:
    """Basic/advanced indexing along the first axes; gradient scatters back."""
    val = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(np.array(val, dtype=np.float64), (a,), bw, "index")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    val = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # (..., n, k) @ (k, m): fold the batch axes into one GEMM
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accum(b, gb)

    return _make(val, (a, b), bw, "matmul")


def embedding_gather(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_gather: ids must be integers")
    if weight.ndim != 2:
        raise ShapeError("embedding_gather", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding_gather: id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accum(weight, full)

    return _make(weight.data[ids], (weight,), bw, "embedding_gather")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    val = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _make(val, (x, gain, bias), bw, "layer_norm")


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max subtraction, never log of softmax)."""
    val = _log_softmax_np(a.data, axis)
    p = np.exp(val)

    def bw(g):
        _accum(a, g - p * np.sum(g, axis=axis, keepdims=True))

    return _make(val, (a,), bw, "log_softmax")


softmax_logits_to_logprobs = log_softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    p = np.exp(_log_softmax_np(a.data, axis))

    def bw(g):
        _accum(a, p * (g - np.sum(g * p, axis=axis, keepdims=True)))

    return _make(p, (a,), bw, "softmax")


def gather_logprob(logprobs: Tensor, token_ids) -> Tensor:
    """Pick ``logprobs[..., token_ids[...]]`` along the last axis."""
    ids = np.asarray(token_ids)
    if logprobs.shape[:-1] != ids.shape:
        raise ShapeError("gather_logprob", logprobs.shape, ids.shape)
    v = logprobs.shape[-1]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"gather_logprob: token id out of range [0, {v})")
    val = np.take_along_axis(logprobs.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(logprobs.data)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        _accum(logprobs, full)

    return _make(val, (logprobs,), bw, "gather_logprob")


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor):
    """Populate ``.grad`` on every leaf reachable from a scalar ``root``.

    Interior nodes are marked consumed; a second call on the same graph raises
    :class:`GraphError` until :func:`reset_graph` is called.  Leaf gradients
    accumulate across *different* graphs, which is how gradient accumulation works.
    """
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward on a tensor that does not require grad")
    order = _topo(root)
    if any(n._consumed for n in order):
        raise GraphError("graph already differentiated; call reset_graph() first")
    if root.is_leaf:
        _accum(root, np.ones_like(root.data))
        return
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.is_leaf:
            continue
        node._consumed = True
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def reset_graph(root: Tensor):
    """Allow ``root``'s graph to be differentiated again and clear leaf grads."""
    for node in _topo(root):
        node._consumed = False
        node.grad = None


def parameters_of(root: Tensor) -> Iterable[Tensor]:
    return [n for n in _topo(root) if n.is_leaf and n.requires_grad]
