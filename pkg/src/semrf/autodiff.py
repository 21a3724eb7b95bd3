"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable value is a :class:`Tensor`.  Tensors created through
:meth:`Tape.param` (or :meth:`Tape.leaf`) live on a tape; any operation that
consumes at least one taped tensor records an adjoint rule on that tape.
Tensors built with :func:`constant` carry no node and never receive
gradients.

Shapes are explicit: elementwise operations require identical shapes and
the few broadcasting patterns the renderer needs (bias rows, tiling) are
separate, named operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse
from scipy.special import expit

# Rows of the left matmul operand are padded to this multiple so the BLAS
# kernel (and therefore each row's rounding) does not depend on batch size.
_ROW_QUANTUM = 8


class ShapeError(ValueError):
    pass


@dataclass
class _Record:
    out: int
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of operations; single writer."""

    records: list[_Record] = field(default_factory=list)
    params: dict[int, str] = field(default_factory=dict)
    shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    _next: int = 0

    def _new_node(self) -> int:
        self._next += 1
        return self._next - 1

    def param(self, value, name: str | None = None) -> "Tensor":
        """Register a differentiable leaf (a parameter)."""
        t = Tensor(value, tape=self, node=self._new_node())
        self.params[t.node] = name if name is not None else f"p{t.node}"
        self.shapes[t.node] = t.shape
        return t

    # non-parameter leaves that still need gradients (feature maps fed in
    # from another tape) are registered the same way
    leaf = param

    def record(self, value: np.ndarray, inputs: Sequence["Tensor"], vjp) -> "Tensor":
        out = Tensor(value, tape=self, node=self._new_node())
        self.records.append(_Record(out.node, tuple(t.node for t in inputs), vjp))
        return out

    def __len__(self):
        return len(self.records)


class Tensor:
    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim and min(v.shape) < 1:
            raise ShapeError(f"tensor extents must be >= 1, got {v.shape}")
        self.value = v
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def __repr__(self):
        tag = f"node={self.node}" if self.node is not None else "const"
        return f"Tensor(shape={self.shape}, {tag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None and t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(value, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(value, inputs, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x[..., :] + b with b of shape (x.shape[-1],)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: bias {b.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.value.ndim - 1))
    return _emit(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead)))


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = a.shape[0]
    pad = (-m) % _ROW_QUANTUM
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]))])
        return (a @ b)[:m]
    return a @ b


def matmul(a, b) -> Tensor:
    """2-D matrix product, or batched (B,M,K)@(B,K,N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = _mm(av, bv)
        return _emit(out, (a, b), lambda g: (_mm(g, bv.T), av.T @ g))
    if av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = np.matmul(av, bv)
        return _emit(
            out,
            (a, b),
            lambda g: (np.matmul(g, bv.transpose(0, 2, 1)), np.matmul(av.transpose(0, 2, 1), g)),
        )
    raise ShapeError(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")


def dense(x, w, b, residual=None, relu: bool = False) -> Tensor:
    """Fused ``act(x @ w + b [+ residual])`` for 2-D x, computed in place.

    Equivalent to the composition of matmul, bias_add, add and relu, with
    fewer passes over the (rows, width) activations.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"dense: {xv.shape} @ {wv.shape}")
    if b.value.shape != (wv.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} for output width {wv.shape[1]}")
    out = _mm(xv, wv)
    out += b.value
    inputs = [x, w, b]
    if residual is not None:
        residual = _as_tensor(residual)
        _same_shape("dense residual", residual, Tensor(out))
        out += residual.value
        inputs.append(residual)
    if relu:
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        if relu:
            g = g * (out > 0)
        parts = [_mm(g, wv.T), xv.T @ g, g.sum(axis=0)]
        if residual is not None:
            parts.append(g)
        return tuple(parts)

    return _emit(out, inputs, vjp)


def spmm(A: scipy.sparse.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor (gathers, bilinear taps)."""
    x = _as_tensor(x)
    if x.value.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: {A.shape} @ {x.shape}")
    A = scipy.sparse.csr_matrix(A)
    At = A.T.tocsr()
    return _emit(np.asarray(A @ x.value), (x,), lambda g: (np.asarray(At @ g),))


# ----------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    nd = ts[0].value.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.value.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.value for t in ts], axis=ax)
    return _emit(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.value.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] outside axis of {x.shape}")
    idx = [slice(None)] * x.value.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit(x.value[idx], (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    out = x.value.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(old),))


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Stack n copies of x along a new leading block: (P,...) -> (n*P,...)."""
    x = _as_tensor(x)
    shape = x.shape
    out = np.concatenate([x.value] * n, axis=0)
    return _emit(out, (x,), lambda g: (g.reshape((n,) + shape).sum(axis=0),))


def pick(x: Tensor, idx) -> Tensor:
    """out[r] = x[r, idx[r]] for a 2-D x."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.value.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: indices {idx.shape} for tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"pick: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(x.value[rows, idx], (x,), vjp)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------


def _tree_sum(stack: np.ndarray) -> np.ndarray:
    parts = list(stack)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _ordered_sum(v: np.ndarray, axis: int) -> np.ndarray:
    # sorted pairwise sum: independent of the order of the reduced entries
    return _tree_sum(np.sort(np.moveaxis(v, axis, 0), axis=0))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        out = np.asarray(_ordered_sum(x.value.reshape(-1), 0))
        return _emit(out, (x,), lambda g: (np.full(shape, float(g)),))
    ax = axis % x.value.ndim
    out = _ordered_sum(x.value, ax)
    return _emit(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def cumsum(x: Tensor, exclusive: bool = False) -> Tensor:
    """Running sum along the last axis."""
    x = _as_tensor(x)
    c = np.cumsum(x.value, axis=-1)
    if exclusive:
        c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), c[..., :-1]], axis=-1)

    def vjp(g):
        r = np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1)
        if exclusive:
            r = np.concatenate([r[..., 1:], np.zeros(g.shape[:-1] + (1,))], axis=-1)
        return (r,)

    return _emit(c, (x,), vjp)


# ----------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.value)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    return _emit(np.log(v), (x,), lambda g: (g / v,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.maximum(x.value, 0.0)
    return _emit(y, (x,), lambda g: (g * (y > 0),))


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    return _emit(np.logaddexp(0.0, v), (x,), lambda g: (g * expit(v),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = expit(x.value)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _emit(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------


def vjp(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Propagate seed adjoints backwards; returns gradients of every param leaf."""
    grads: dict[int, np.ndarray] = {}
    for node, s in seeds.items():
        grads[node] = np.array(s, dtype=np.float64)
    for rec in reversed(tape.records):
        g = grads.get(rec.out)
        if g is None:
            continue
        if rec.out not in tape.params:
            del grads[rec.out]
        parts = rec.vjp(g)
        for node, part in zip(rec.inputs, parts):
            if node is None or part is None:
                continue
            prev = grads.get(node)
            grads[node] = part if prev is None else prev + part
    return {n: grads.get(n, None) for n in tape.params}


def backprop(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar output with respect to every parameter on the tape.

    Parameters with no path to the output get zero arrays.
    """
    if output.value.size != 1:
        raise ShapeError(f"backprop needs a scalar output, got shape {output.shape}")
    if output.node is not None and output.tape is not tape:
        raise ValueError("output was not produced on this tape")
    seeds = {} if output.node is None else {output.node: np.ones(output.shape)}
    raw = vjp(tape, seeds)
    return {n: (g if g is not None else np.zeros(tape.shapes[n])) for n, g in raw.items()}


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    h: float = 1e-5,
    grad: np.ndarray | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    indices: Sequence[int] | None = None,
) -> float:
    """Max over entries of |analytic - central difference| / max(1, |central difference|).

    ``grad`` (or ``grad_fn(params)``) is the analytic gradient, same shape as
    ``params``.  ``indices`` restricts the comparison to a subset of flat
    entries, which keeps checks of large parameter vectors affordable.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.array(params, dtype=np.float64)
    if grad is None:
        if grad_fn is None:
            raise ValueError("need grad or grad_fn")
        grad = grad_fn(p.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    flat = p.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(flat.reshape(p.shape).copy()))
        flat[i] = old - h
        fm = float(f(flat.reshape(p.shape).copy()))
        flat[i] = old
        fd = (fp - fm) / (2.0 * h)
        err = abs(grad[i] - fd) / max(1.0, abs(fd))
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    return worst
