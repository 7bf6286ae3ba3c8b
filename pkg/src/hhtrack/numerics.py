"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy-backed. Operations executed inside an active :class:`Tape`
on inputs that require gradients are recorded; ``tape.backward(loss)`` then
replays the chain rule in reverse over exactly those records.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x.data
"""

from __future__ import annotations

import contextlib
import math
from contextvars import ContextVar
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE: ContextVar[type] = ContextVar("hhtrack_dtype", default=np.float64)
_TAPE: ContextVar["Tape | None"] = ContextVar("hhtrack_tape", default=None)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


def get_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Set the floating point type used for every tensor created inside the block."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    token = _DTYPE.set(dtype)
    try:
        yield dtype
    finally:
        _DTYPE.reset(token)


class Tensor:
    """Immutable n-dimensional array, optionally a differentiable leaf or tape node."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=get_dtype())
        self._set(arr, requires_grad)

    def _set(self, arr: np.ndarray, requires_grad: bool) -> None:
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out._set(np.asarray(arr, dtype=get_dtype(), order="C"), requires_grad)
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations, consumed by :meth:`backward`.

    A tape is active only inside its ``with`` block and only in the thread
    (or context) that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False
        self._token = None

    def __enter__(self):
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._produced.add(id(out))
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise RuntimeError("loss was not produced on this tape (detached)")
        if self._consumed:
            raise RuntimeError("tape already used for backward; call zero_grad() first")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.dtype != inp.data.dtype:
                    gi = gi.astype(inp.data.dtype)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    def zero_grad(self) -> None:
        for leaf in self._leaves.values():
            leaf.grad = None
        self._consumed = False


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf recorded on ``tape``; returns them by id."""
    tape.backward(loss)
    return {k: t.grad for k, t in tape._leaves.items()}


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def arctan(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),))


def elementwise_max(a, b) -> Tensor:
    """Per-element maximum. Ties send half of the gradient to each input."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"elementwise_max shape mismatch: {a.shape} vs {b.shape}")
    out = np.maximum(a.data, b.data)

    def vjp(g):
        wa = np.where(a.data > b.data, 1.0, np.where(a.data == b.data, 0.5, 0.0)).astype(g.dtype)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * (1.0 - wa), b.shape)

    return _emit(out, (a, b), vjp)


def elementwise_min(a, b) -> Tensor:
    return neg(elementwise_max(neg(a), neg(b)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return elementwise_max(a, Tensor._wrap(np.zeros_like(a.data)))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (``cond`` is not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _emit(out, (a, b), vjp)


# reductions and shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(a.data[index]), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        g = np.ascontiguousarray(g)
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold leading axes so the weight gradient is one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif a.ndim == 2:
                gb = a.data.T @ g
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if b.ndim == 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data
    return _emit(out, (a, b), vjp)


def softmax_rows(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (the last one by default) with max subtraction."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({n},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gamma, beta), vjp)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi from the error function."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _emit(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    pad = [(0, 0)] * a.ndim
    pad[-3] = (p, p)
    pad[-2] = (p, p)
    return np.pad(a, pad)


def depthwise_conv2d(x, weight, bias) -> Tensor:
    """Per-channel k x k convolution, stride 1, zero 'same' padding.

    x: (..., H, W, C) channels-last; weight: (C, k, k); bias: (C,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    c, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd and square, got {weight.shape}")
    if x.shape[-1] != c:
        raise ValueError(f"depthwise conv expects {c} channels, got {x.shape[-1]}")
    p = k // 2
    h, w = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x.data, p)
    out = np.zeros(x.shape, dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + h, j:j + w, :] * weight.data[:, i, j]
    out += bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        lead = tuple(range(g.ndim - 1))
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + h, j:j + w, :] += g * weight.data[:, i, j]
                gw[:, i, j] = (g * xp[..., i:i + h, j:j + w, :]).sum(axis=lead)
        gx = gxp[..., p:p + h, p:p + w, :]
        return gx, gw, g.sum(axis=lead)

    return _emit(out, (x, weight, bias), vjp)


def conv2d(x, weight, bias) -> Tensor:
    """Dense k x k convolution, stride 1, zero 'same' padding, channels-last.

    x: (..., H, W, Cin); weight: (k, k, Cin, Cout); bias: (Cout,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv kernel must be odd and square, got {weight.shape}")
    if x.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    p = k // 2
    h, w = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x.data, p)
    cols = np.stack([xp[..., i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-2)
    cols = cols.reshape(x.shape[:-1] + (k * k * cin,))
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat + bias.data

    def vjp(g):
        gcols = (g @ wmat.T).reshape(x.shape[:-1] + (k * k, cin))
        gxp = np.zeros_like(xp)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[..., i:i + h, j:j + w, :] += gcols[..., idx, :]
        gx = gxp[..., p:p + h, p:p + w, :]
        gw = cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)
        lead = tuple(range(g.ndim - 1))
        return gx, gw.reshape(weight.shape), g.sum(axis=lead)

    return _emit(out, (x, weight, bias), vjp)


# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple | None = None
    analytic: list[np.ndarray] = field(default_factory=list, repr=False)
    numeric: list[np.ndarray] = field(default_factory=list, repr=False)


def finite_diff_check(f, x, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``x`` is a tensor or a sequence of tensors passed positionally to ``f``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with Tape() as tape:
        out = f(*leaves)
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def value(arrays):
        return float(f(*[Tensor(a) for a in arrays]).data.reshape(-1)[0])

    numeric = []
    worst, worst_at = 0.0, None
    for ti, b in enumerate(base):
        num = np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            arrays = [a.copy() for a in base]
            arrays[ti][idx] = b[idx] + h
            fp = value(arrays)
            arrays[ti][idx] = b[idx] - h
            fm = value(arrays)
            num[idx] = (fp - fm) / (2.0 * h)
            an = analytic[ti][idx]
            rel = abs(an - num[idx]) / max(abs(an), abs(num[idx]), 1e-8)
            if rel > worst or worst_at is None:
                worst, worst_at = rel, (ti, idx)
        numeric.append(num)
    return GradCheckReport(worst, worst <= tol, worst_at, analytic, numeric)


# optimizer


@dataclass(frozen=True)
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamWState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adamw_step(param: Tensor, grad, state: AdamWState) -> tuple[Tensor, AdamWState]:
    """One AdamW update with decoupled weight decay and bias-corrected moments."""
    g = np.asarray(grad, dtype=param.data.dtype)
    if g.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adamw shape mismatch: param {param.shape}, grad {g.shape}, "
                         f"state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    p = param.data * (1.0 - state.lr * state.weight_decay)
    p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return Tensor._wrap(p.astype(param.data.dtype, copy=False), param.requires_grad), \
        replace(state, m=m, v=v, t=t)
