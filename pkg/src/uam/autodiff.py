"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Design notes:
  * Storage is a row-major numpy float64 array; shapes are explicit and every
    op validates conformance itself (elementwise ops follow standard
    broadcasting, matmul is strict stacked matrix product).
  * The computation graph is rebuilt on every forward pass. Each tensor
    produced while gradients are enabled records its parents, a backward
    closure, and a monotonically increasing sequence id; the recorded graph
    is therefore the creation-order Wengert list, and ``backward`` walks the
    reachable nodes in exact reverse creation order.
  * Gradients accumulate additively, so reusing a leaf twice doubles its
    gradient. Tensors created outside any recorded op and with
    ``requires_grad=False`` are plain values and never accumulate gradient.
  * ``finite_difference_gradient`` is the central-difference oracle used by
    the gradient check suite; it only mutates raw parameter storage and never
    touches the graph machinery it is checking.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for an op (message names op and shapes)."""


_grad_enabled: bool = True
_seq = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 array that may participate in a recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple = ()
        self._seq = 0

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing -------------------------------------------------------
    def _tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self._tracked():
            raise ValueError("backward() on a tensor detached from any graph")
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._backward is not None:
                nodes.append(t)
                for p in t._parents:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for t in nodes:
            t._backward(t.grad)
            if not t.requires_grad:
                t.grad = None  # intermediate grads are dead once propagated

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into t.grad. ``own=True`` promises ``g`` is a fresh array no
    other closure holds, letting the first contribution skip the copy."""
    if not t._tracked():
        return
    if t.grad is None:
        t.grad = g if own and g.flags.writeable else np.array(g, copy=True)
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray | None:
    """Full-size grad buffer for slice/index accumulation, or None if untracked."""
    if not t._tracked():
        return None
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _record(out: Tensor, parents: tuple, backward: Callable[[np.ndarray], None]) -> Tensor:
    if _grad_enabled and any(p._tracked() for p in parents):
        out._parents = parents
        out._backward = backward
        out._seq = next(_seq)
    return out


# -- elementwise and reduction primitives -------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, own=ga is not g)
        gb = _unbroadcast(g, b.shape)
        _accum(b, gb, own=gb is not g)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, own=ga is not g)
        _accum(b, _unbroadcast(-g, b.shape), own=True)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), own=True)

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g):
        _accum(a, -g, own=True)

    return _record(out, (a,), backward)


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0), own=True)

    return _record(out, (a,), backward)


def rsqrt(a: Tensor) -> Tensor:
    """1/sqrt(x), elementwise."""
    return pow_const(a, -0.5)


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)

    def backward(g):
        _accum(a, g * y, own=True)

    return _record(out, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward(g):
        _accum(a, g / a.data, own=True)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    out = Tensor(y)

    def backward(g):
        _accum(a, g * y * (1.0 - y), own=True)

    return _record(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    out = Tensor(np.logaddexp(0.0, a.data))

    def backward(g):
        _accum(a, g * _stable_sigmoid(a.data), own=True)

    return _record(out, (a,), backward)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - inner), own=True)

    return _record(out, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, shape))

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    count = a.data.size if axis is None else np.prod([shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, shape) / count, own=True)

    return _record(out, (a,), backward)


# -- shape primitives ----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    orig = a.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    orig = a.shape

    def backward(g):
        gr = _unbroadcast(g, orig)
        _accum(a, gr, own=gr is not g)

    return _record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    ax = axis if axis >= 0 else len(base) + axis
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            i != ax and t.shape[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _record(out, tuple(tensors), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list:
    """Split along ``axis`` into chunks of the given sizes."""
    ax = axis if axis >= 0 else a.ndim + axis
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to axis extent {a.shape[ax]} of {a.shape}")
    outs = []
    lo = 0
    for sz in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(lo, lo + sz)
        idx = tuple(idx)
        piece = Tensor(a.data[idx])

        def backward(g, idx=idx):
            buf = _grad_buffer(a)
            if buf is not None:
                buf[idx] += g

        outs.append(_record(piece, (a,), backward))
        lo += sz
    return outs


def select(a: Tensor, index: int, axis: int) -> Tensor:
    """Integer-index along ``axis`` (the axis is removed)."""
    ax = axis if axis >= 0 else a.ndim + axis
    idx = [slice(None)] * a.ndim
    idx[ax] = index
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def backward(g):
        buf = _grad_buffer(a)
        if buf is not None:
            buf[idx] += g

    return _record(out, (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, shape))
    ax = axis if axis >= 0 else expanded[0].ndim + axis
    return concat(expanded, axis=ax)


# -- linear algebra and indexing ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product with numpy semantics (1-D operands promoted)."""
    A, B = a.data, b.data
    a1 = A.ndim == 1
    b1 = B.ndim == 1
    if a1:
        A = A[None, :]
    if b1:
        B = B[:, None]
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    try:
        y = A @ B
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}") from None
    if a1:
        y = y[..., 0, :]
    if b1:
        y = y[..., 0]
    out = Tensor(y)

    def backward(g):
        G = g
        if a1 and b1:
            G = G.reshape(1, 1)
        elif a1:
            G = G[..., None, :]
        elif b1:
            G = G[..., :, None]
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if a1:
            ga = ga[..., 0, :]
            ga = _unbroadcast(ga, a.shape)
        else:
            ga = _unbroadcast(ga, a.shape)
        if b1:
            gb = gb[..., 0]
            gb = _unbroadcast(gb, b.shape)
        else:
            gb = _unbroadcast(gb, b.shape)
        _accum(a, ga, own=True)
        _accum(b, gb, own=True)

    return _record(out, (a, b), backward)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward(g):
        buf = _grad_buffer(a)
        if buf is not None:
            np.add.at(buf, idx, g)

    return _record(out, (a,), backward)


def scatter_rows(values: Tensor, indices: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values`` rows at ``indices`` of a zero [n_rows, ...] tensor, adding on collision."""
    idx = np.asarray(indices, dtype=np.int64)
    buf = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(buf, idx, values.data)
    out = Tensor(buf)

    def backward(g):
        _accum(values, g[idx], own=True)

    return _record(out, (values,), backward)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, descending.

    Ties break toward the lower index (stable sort on negated values).
    """
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


# -- finite-difference oracle ----------------------------------------------------

def finite_difference_gradient(
    f: Callable[[], float],
    params: Iterable[tuple[str, Tensor]],
    epsilon: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. every scalar in ``params``.

    ``f`` must be deterministic and read the parameter tensors in place.
    Runs with graph recording off; parameter storage is restored exactly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads: dict[str, np.ndarray] = {}
    with no_grad():
        for name, t in params:
            flat = t.data.reshape(-1)
            g = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(f())
                flat[i] = orig - epsilon
                fm = float(f())
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * epsilon)
            grads[name] = g.reshape(t.shape)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
