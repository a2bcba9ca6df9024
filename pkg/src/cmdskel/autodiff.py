"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy array.  Every differentiable
operation records its parents and a closure mapping the output gradient to
the parents' gradients; :func:`backward` walks that graph in reverse
topological order.  Operations on tensors that do not require gradients
record nothing, which is how teacher-side (key encoder) values enter the
graph as constants.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    NumericDomainError,
    ParameterError,
    UsageError,
)

NORM_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional array that can take part in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn`` receives the gradient w.r.t. the output and returns one
    gradient (or ``None``) per parent, in order.  Nothing is recorded when no
    parent requires a gradient or recording is disabled.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow warnings for large negative inputs
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,))


# -- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.asarray(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def gather(x: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Pick ``x`` entries along ``axis`` at ``indices`` (take-along-axis)."""
    indices = np.asarray(indices)
    n = x.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise UsageError(f"gather index out of range for axis of size {n}")

    def bw(g):
        full = np.zeros_like(x.data)
        _scatter_add(full, indices, g, axis)
        return (full,)

    return make_node(np.take_along_axis(x.data, indices, axis=axis), (x,), bw)


def _scatter_add(dst: np.ndarray, indices: np.ndarray, src: np.ndarray, axis: int) -> None:
    axis = axis % dst.ndim
    grids = list(np.ix_(*[np.arange(s) for s in indices.shape]))
    grids[axis] = indices
    np.add.at(dst, tuple(grids), src)


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of the last two axes (batched over leading axes)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw)


# -- probability ops -------------------------------------------------------


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InputError(f"{what} contains non-finite values")


def log_softmax(logits: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """``log softmax(logits / tau)`` along ``axis``, max-shifted."""
    _check_temperature(tau)
    _check_finite(logits.data, "logits")
    scaled = logits.data / tau
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / tau,)

    return make_node(out, (logits,), bw)


def softmax(logits: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax ``exp(l_i/tau) / sum_j exp(l_j/tau)``.

    The maximum is subtracted before exponentiation; at tau = 0.05 logits in
    [-1, 1] are scaled by 20 and the naive form loses precision fast.
    """
    _check_temperature(tau)
    _check_finite(logits.data, "logits")
    scaled = logits.data / tau
    e = np.exp(scaled - scaled.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / tau,)

    return make_node(out, (logits,), bw)


def kl_div(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) summed over ``axis`` with ``0 log 0 = 0``.

    Returns one value per leading index (a scalar for vectors).  Gradients
    flow to whichever arguments require them; pass the teacher distribution
    as a constant to distil into ``q`` only.
    """
    p, q = _pair(p, q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    support = pd > 0
    if np.any(support & (qd <= 0)):
        raise NumericDomainError("q has zero mass where p is positive")
    safe_p = np.where(support, pd, 1.0)
    safe_q = np.where(support, qd, 1.0)
    log_ratio = np.where(support, np.log(safe_p) - np.log(safe_q), 0.0)
    out = (pd * log_ratio).sum(axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        gp = gq = None
        if p.requires_grad:
            gp = g * np.where(support, log_ratio + 1.0, 0.0)
        if q.requires_grad:
            gq = g * np.where(support, -pd / safe_q, 0.0)
        return gp, gq

    return make_node(np.asarray(out), (p, q), bw)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``axis``."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {eps}")
    out = v.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (v,), bw)


def topk(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """K largest entries along the last axis, descending.

    Ties are ordered by smaller index first.  Selection is not
    differentiable; gather with the returned indices to build a graph.
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    n = arr.shape[-1]
    if not 1 <= k <= n:
        raise ParameterError(f"topk needs 1 <= K <= N, got K={k}, N={n}")
    # stable sort on the negated values keeps equal entries in index order
    idx = np.argsort(-arr, axis=-1, kind="stable")[..., :k]
    return np.take_along_axis(arr, idx, axis=-1), idx


# -- graph traversal -------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that needs it.

    Interior nodes do not keep gradients; each node's closure runs exactly
    once, after all of its consumers have contributed.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # drop graph references so intermediate buffers can be freed
    _release(loss)


def _release(root: Tensor) -> None:
    stack = [root]
    while stack:
        node = stack.pop()
        if node._backward is None:
            continue
        parents = node._parents
        node._parents = ()
        node._backward = None
        stack.extend(parents)


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
