"""Reverse-mode automatic differentiation on dense float64 arrays.

Eager tape design: every operation runs immediately on numpy values and, when
gradients are enabled and some input requires them, records a node holding the
parent links and an adjoint closure.  ``backward`` replays the reachable nodes
in exact reverse construction order (construction order is a topological order
for an eager tape), accumulating adjoints in a per-call buffer and adding the
results into the ``.grad`` of every requires-grad leaf.  Repeated backward
calls therefore accumulate leaf gradients additively until ``zero_grad``.

The op set is deliberately small: matmul, broadcast arithmetic, the elementwise
functions needed by the field networks (sin/cos/exp/log/sqrt/abs/max/sigmoid/
softplus), reductions, row gather/scatter, and row/column slicing.  Everything
is float64; integer index arrays are plain numpy arrays, not tensors.
"""

from __future__ import annotations

import logging
import numbers
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeMismatchError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


class GraphError(RuntimeError):
    """Raised for invalid tape operations (e.g. backward from a non-scalar)."""


_GRAD_ENABLED = True
_NODE_COUNTER = 0


class no_grad:
    """Context manager that disables tape recording (forward values only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A value on the tape.  Leaves carry ``requires_grad``; interior nodes
    carry parent links and an adjoint closure."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        global _NODE_COUNTER
        _NODE_COUNTER += 1
        self._order = _NODE_COUNTER

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # -- gradient bookkeeping --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Constant copy sharing no tape history."""
        return Tensor(self.values.copy())

    def backward(self) -> int:
        return backward(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (numbers.Number, np.ndarray)):
        return Tensor(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op result; records tape state only when some parent needs it."""
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if grad.shape != shape:
        raise ShapeMismatchError(f"cannot reduce gradient {grad.shape} to {shape}")
    return grad


# ---------- binary arithmetic ----------


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def backward_fn(dY, acc):
        acc(a, _unbroadcast(dY, a.shape))
        acc(b, _unbroadcast(dY, b.shape))

    return _node(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = a.values - b.values

    def backward_fn(dY, acc):
        acc(a, _unbroadcast(dY, a.shape))
        acc(b, _unbroadcast(-dY, b.shape))

    return _node(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def backward_fn(dY, acc):
        acc(a, _unbroadcast(dY * bv, a.shape))
        acc(b, _unbroadcast(dY * av, b.shape))

    return _node(out, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv

    def backward_fn(dY, acc):
        acc(a, _unbroadcast(dY / bv, a.shape))
        acc(b, _unbroadcast(-dY * av / (bv * bv), b.shape))

    return _node(out, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward_fn(dY, acc):
        acc(a, -dY)

    return _node(-a.values, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def backward_fn(dY, acc):
        acc(a, dY @ bv.T)
        acc(b, av.T @ dY)

    return _node(out, (a, b), backward_fn)


# ---------- elementwise functions ----------


def sin(a: Tensor) -> Tensor:
    a = _wrap(a)
    av = a.values

    def backward_fn(dY, acc):
        acc(a, dY * np.cos(av))

    return _node(np.sin(av), (a,), backward_fn)


def cos(a: Tensor) -> Tensor:
    a = _wrap(a)
    av = a.values

    def backward_fn(dY, acc):
        acc(a, -dY * np.sin(av))

    return _node(np.cos(av), (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.values)

    def backward_fn(dY, acc):
        acc(a, dY * out)

    return _node(out, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    av = a.values

    def backward_fn(dY, acc):
        acc(a, dY / av)

    return _node(np.log(av), (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.values)

    def backward_fn(dY, acc):
        acc(a, dY * (0.5 / out))

    return _node(out, (a,), backward_fn)


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    av = a.values

    def backward_fn(dY, acc):
        acc(a, dY * (2.0 * av))

    return _node(av * av, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    a = _wrap(a)
    av = a.values

    def backward_fn(dY, acc):
        acc(a, dY * np.sign(av))

    return _node(np.abs(av), (a,), backward_fn)


def maximum(a: Tensor, threshold: float) -> Tensor:
    """Elementwise max(a, threshold) against a python scalar; subgradient 0 at ties."""
    a = _wrap(a)
    av = a.values
    mask = av > threshold

    def backward_fn(dY, acc):
        acc(a, dY * mask)

    return _node(np.maximum(av, threshold), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic: branches on the sign of the argument."""
    a = _wrap(a)
    out = _stable_sigmoid(a.values)

    def backward_fn(dY, acc):
        acc(a, dY * out * (1.0 - out))

    return _node(out, (a,), backward_fn)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # branchless overflow-safe form: exp(-|x|) never exceeds 1
    x = np.asarray(x, dtype=DTYPE)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, t) / (1.0 + t)


def softplus(a: Tensor, sharpness: float = 1.0) -> Tensor:
    """softplus(x) = log(1 + exp(sharpness*x)) / sharpness, linearized for large args."""
    a = _wrap(a)
    z = sharpness * a.values
    # exp(-|z|) serves both the value and the sigmoid in the derivative
    t = np.exp(-np.abs(z))
    out = (np.maximum(z, 0.0) + np.log1p(t)) / sharpness

    def backward_fn(dY, acc):
        g = np.where(z >= 0, 1.0, t)
        np.divide(g, 1.0 + t, out=g)
        np.multiply(g, dY, out=g)
        acc(a, g)

    return _node(out, (a,), backward_fn)


# ---------- reductions and indexing ----------


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward_fn(dY, acc):
        if axis is None:
            acc(a, np.broadcast_to(dY, shape).copy())
        else:
            d = dY if keepdims else np.expand_dims(dY, axis)
            acc(a, np.broadcast_to(d, shape).copy())

    return _node(out, (a,), backward_fn)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather: out[i] = a[indices[i]].  Adjoint is a scatter-add."""
    a = _wrap(a)
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise TypeError("gather: indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for first axis of length {a.shape[0]}")
    out = a.values[indices]
    shape = a.shape

    def backward_fn(dY, acc):
        g = np.zeros(shape, dtype=DTYPE)
        np.add.at(g, indices, dY)
        acc(a, g)

    return _node(out, (a,), backward_fn)


def scatter_add(a: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Segment sum: out[k] = sum of a[i] with indices[i] == k.  Adjoint is a gather."""
    a = _wrap(a)
    indices = np.asarray(indices)
    if indices.shape != a.shape[:1]:
        raise ShapeMismatchError(f"scatter_add: indices shape {indices.shape} != leading axis of {a.shape}")
    if a.ndim == 1:
        out = np.bincount(indices, weights=a.values, minlength=size)
    else:
        out = np.zeros((size,) + a.shape[1:], dtype=DTYPE)
        np.add.at(out, indices, a.values)

    def backward_fn(dY, acc):
        acc(a, dY[indices])

    return _node(out, (a,), backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    out = a.values[start:stop].copy()
    shape = a.shape

    def backward_fn(dY, acc):
        g = np.zeros(shape, dtype=DTYPE)
        g[start:stop] = dY
        acc(a, g)

    return _node(out, (a,), backward_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeMismatchError(f"slice_cols: expected 2-D tensor, got {a.shape}")
    out = a.values[:, start:stop].copy()
    shape = a.shape

    def backward_fn(dY, acc):
        g = np.zeros(shape, dtype=DTYPE)
        g[:, start:stop] = dY
        acc(a, g)

    return _node(out, (a,), backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.values.reshape(shape)
    orig = a.shape

    def backward_fn(dY, acc):
        acc(a, dY.reshape(orig))

    return _node(out.copy(), (a,), backward_fn)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward_fn(dY, acc):
        at = 0
        for p, n in zip(parts, sizes):
            acc(p, dY[at:at + n])
            at += n

    return _node(out, tuple(parts), backward_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    for p in parts:
        if p.ndim != 2:
            raise ShapeMismatchError(f"concat_cols: expected 2-D parts, got {p.shape}")
    out = np.concatenate([p.values for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def backward_fn(dY, acc):
        at = 0
        for p, w in zip(parts, widths):
            acc(p, dY[:, at:at + w])
            at += w

    return _node(out, tuple(parts), backward_fn)


def where_select(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Hard selector on a boolean numpy mask; gradient flows only to the chosen branch."""
    a, b = _wrap(a), _wrap(b)
    condition = np.asarray(condition, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"where_select: branch shapes differ, {a.shape} vs {b.shape}")
    out = np.where(condition, a.values, b.values)

    def backward_fn(dY, acc):
        acc(a, np.where(condition, dY, 0.0))
        acc(b, np.where(condition, 0.0, dY))

    return _node(out, (a, b), backward_fn)


# ---------- backward driver ----------


def backward(root: Tensor) -> int:
    """Run reverse-mode accumulation from a scalar root.

    Returns the number of adjoint steps performed (interior nodes visited),
    which equals the number of recorded primitives reachable from the root.
    Leaf gradients are added into ``.grad``; calling backward twice without
    ``zero_grad`` therefore doubles them.
    """
    if root.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward on a tensor with no recorded graph")

    # Reachable subgraph; construction order is a topological order.
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        if key in adjoint:
            adjoint[key] = adjoint[key] + g
        else:
            adjoint[key] = g

    steps = 0
    for t in nodes:
        dY = adjoint.get(id(t))
        if dY is None:
            continue
        if t._backward is not None:
            t._backward(dY, acc)
            steps += 1
        elif t.is_leaf() and t.requires_grad:
            if t.grad is None:
                t.grad = np.array(dY, dtype=DTYPE, copy=True)
            else:
                t.grad = t.grad + dY
    return steps


# ---------- optimizer ----------


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters whose gradient is missing or non-finite are skipped (the skip is
    logged); the step counter still advances once per call.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            logger.warning("adam_step: non-finite gradient for %r at t=%d, skipping", name, t)
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.values)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------- finite-difference oracle ----------


def gradient_check(
    f,
    params: list[Tensor],
    eps: float = 1e-5,
    abs_floor: float = 1e-10,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``f`` must rebuild its graph from the current parameter values and return a
    scalar Tensor deterministically.  Every element of every parameter is
    perturbed by +-eps.  The relative error for one element is
    |g_ad - g_fd| / max(|g_ad|, |g_fd|, abs_floor) so that exact zero
    gradients compare cleanly.

    Differences below the difference quotient's own resolution, a few ulps of
    the function magnitude divided by the step, count as agreement: central
    differences quantize at eps_mach * |f| / (2 eps) and cannot certify
    gradients near or below that scale.
    """
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    grads = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    f_scale = abs(float(out.values))

    worst = 0.0
    for p, g_ad in zip(params, grads):
        flat = p.values.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().values)
            flat[i] = orig - eps
            f_minus = float(f().values)
            flat[i] = orig
            f_scale = max(f_scale, abs(f_plus), abs(f_minus))
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            diff = abs(g_fd - g_flat[i])
            if diff <= 16.0 * np.finfo(DTYPE).eps * f_scale / (2.0 * eps):
                continue
            denom = max(abs(g_fd), abs(g_flat[i]), abs_floor)
            worst = max(worst, diff / denom)
    return worst
