"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op records its parents and a backward closure whenever
some input requires gradients, and the graph is rebuilt from scratch each
step. Tensors are value-like; slices and reshapes copy, nothing aliases.
Every forward op validates that its output is finite and raises NumericError
otherwise, so NaN/Inf never propagates silently.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

try:  # fused single-pass Adam; the numpy fallback below is semantically equal
    from numba import njit as _njit

    @_njit(cache=True)
    def _adam_kernel(x, m, v, g, beta1, beta2, eps, corr1, corr2, lr):
        for i in range(x.size):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
            x[i] = x[i] - lr * ((m[i] / corr1) / (np.sqrt(v[i] / corr2) + eps))

    _HAVE_FUSED_ADAM = True
except ImportError:  # pragma: no cover
    _HAVE_FUSED_ADAM = False

Array = np.ndarray


def _check_finite(op: str, data: Array) -> None:
    # Single fused reduction: NaN and +-Inf both poison the sum. Magnitudes
    # large enough to overflow the sum itself are an error state anyway.
    if not np.isfinite(np.sum(data)):
        raise NumericError(f"op '{op}' produced non-finite values")


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: Array, owned: bool = False) -> None:
        # `owned` marks arrays freshly produced by a backward closure, which
        # may be adopted without copying
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    # -- method sugar ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward op.

    Returns g itself (never a fresh view of it) when no reduction applies, so
    callers can use identity to decide buffer ownership.
    """
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(op: str, data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def make_node(op: str, data, parents: Sequence[Tensor], backward) -> Tensor:
    """Extension point for composite ops with a hand-written backward.

    `backward(g)` must call accumulate_grad on each parent that requires
    gradients; pass owned=True only for freshly allocated arrays.
    """
    return _make(op, np.asarray(data, dtype=np.float64), parents, backward)


def _binary(op: str, a, b, fwd, dfa, dfb) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            data = fwd(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"op '{op}': operand shapes {a.shape} and {b.shape} do not broadcast"
        ) from None

    def backward(g: Array) -> None:
        # compute both gradients before adopting g: at most one parent may
        # take ownership of the (already consumed) upstream buffer
        ga = _unbroadcast(dfa(g, a.data, b.data, data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(dfb(g, a.data, b.data, data), b.shape) if b.requires_grad else None
        if ga is not None:
            a.accumulate_grad(ga, owned=True)
        if gb is not None:
            b.accumulate_grad(gb, owned=gb is not g or ga is not g)

    return _make(op, data, (a, b), backward)


def _unary(op: str, a, fwd, df) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        data = fwd(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            gg = df(g, a.data, data)
            a.accumulate_grad(gg, owned=gg is not g)

    return _make(op, data, (a,), backward)


# -- elementwise binary -------------------------------------------------

def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def subtract(a, b) -> Tensor:
    return _binary("subtract", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def multiply(a, b) -> Tensor:
    return _binary("multiply", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def divide(a, b) -> Tensor:
    return _binary("divide", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"op 'matmul': cannot multiply {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T, owned=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g, owned=True)

    return _make("matmul", data, (a, b), backward)


# -- elementwise unary ---------------------------------------------------

def negate(a) -> Tensor:
    return _unary("negate", a, lambda x: -x, lambda g, x, o: -g)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, o: g * (x > 0.0))


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda g, x, o: g * o * (1.0 - o))


def softplus(a) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}) stays finite for any x
    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def df(g, x, o):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    return _unary("softplus", a, fwd, df)


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda g, x, o: g * 2.0 * x)


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def absolute(a) -> Tensor:
    return _unary("abs", a, np.abs, lambda g, x, o: g * np.sign(x))


def clip(a, lo: float, hi: float) -> Tensor:
    # gradient passes through wherever the value was not clamped
    return _unary("clip", a, lambda x: np.clip(x, lo, hi),
                  lambda g, x, o: g * ((x >= lo) & (x <= hi)))


# -- reductions / structure ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _make("sum", data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _make("mean", data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat requires at least one tensor")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise DimensionError(
                f"op 'concat': shapes {ts[0].shape} and {t.shape} differ off axis {axis}"
            )
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g: Array) -> None:
        offset = 0
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t.accumulate_grad(g[tuple(idx)], owned=True)
            offset += s

    return _make("concat", data, ts, backward)


def tensor_slice(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key].copy()

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[key] += g
        a.accumulate_grad(full, owned=True)

    return _make("slice", data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(
            f"op 'reshape': cannot reshape {a.shape} into {tuple(shape)}"
        ) from None

    def backward(g: Array) -> None:
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape), owned=True)

    return _make("reshape", data, (a,), backward)


# -- backward pass ---------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable gradient buffer."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.array(1.0))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- parameters / optimizer -------------------------------------------------

class Parameter:
    """A trainable tensor bundled with its Adam state."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> Array:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; increments step counts and zeroes grads."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        elif not np.isfinite(np.sum(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
        p.step_count += 1
        t = p.step_count
        corr1 = 1.0 - beta1**t
        corr2 = 1.0 - beta2**t
        if _HAVE_FUSED_ADAM and p.tensor.data.size > 256:
            _adam_kernel(p.tensor.data.reshape(-1), p.adam_m.reshape(-1),
                         p.adam_v.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                         beta1, beta2, eps, corr1, corr2, lr)
        else:
            # in-place moment updates; the buffers never alias anything else
            p.adam_m *= beta1
            p.adam_m += (1.0 - beta1) * g
            p.adam_v *= beta2
            p.adam_v += (1.0 - beta2) * (g * g)
            update = (p.adam_m / corr1) / (np.sqrt(p.adam_v / corr2) + eps)
            p.tensor.data -= lr * update
        p.tensor.grad = None
