"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active (``with
Tape() as tape:``). Outside a tape every op is a plain numpy computation, which
is how inference and the finite-difference oracles run.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        out.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        out.requires_grad = requires_grad
        out.grad = None
        out._leaf = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape is consumed by exactly one call to :meth:`backward`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        self.records.append((out, parents, rule))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

        Leaves passed in ``leaves`` that the loss does not depend on get a zero
        gradient. Existing ``.grad`` buffers are overwritten, not accumulated.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        for out, parents, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = rule(g)
            for p, gp in zip(parents, parent_grads):
                if gp is None or not p.requires_grad:
                    continue
                if p._leaf:
                    key = id(p)
                    if key in leaf_grads:
                        leaf_grads[key] = (p, leaf_grads[key][1] + gp)
                    else:
                        leaf_grads[key] = (p, np.array(gp, dtype=np.float64))
                else:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + gp
                    else:
                        grads[key] = gp
        for leaf in leaves:
            leaf.grad = np.zeros_like(leaf.data)
        for leaf, g in leaf_grads.values():
            leaf.grad = g.reshape(leaf.shape)
        self.records.clear()
        self._produced.clear()


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = ()) -> None:
    tape.backward(loss, leaves)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._result(data, needs)
    if needs:
        tape.record(out, tuple(parents), rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), rule)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def elementwise(kind: str, a, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(ops)}")
    return ops[kind](a, b)


# elementwise unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if p == 0.0:
        return _make(np.ones_like(a.data), (a,), lambda g: (None,))
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU; smooth everywhere, which keeps gradient checks clean."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _make(out, (a,), rule)


# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), rule)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays or ints, not Tensors")

    def rule(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, rule)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, rule)


# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), rule)


# normalizations


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx_hat = g * gamma.data
        gx = inv_std * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), rule)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``; zero vectors map to zero (gradient zero)."""
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    out = np.where(norm > 0, a.data / safe, 0.0)

    def rule(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(norm > 0, gx, 0.0),)

    return _make(out, (a,), rule)
