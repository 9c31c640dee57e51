"""Dense tensor substrate with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order, float64 by default (float32 is a
global opt-in for throughput runs).  Every operation is a pure function that
returns a new ``Tensor``; when any input carries ``requires_grad`` the result
records a vector-Jacobian closure so that ``backward`` on a scalar loss fills
``.grad`` on every reachable leaf.

Matrix products default to BLAS-backed ``np.matmul`` (fast, reproducible
run-to-run on one platform).  Setting the environment variable
``RODIMUS_DETERMINISTIC=1`` (or ``set_deterministic(True)``) switches to
``np.einsum(optimize=False)``, which accumulates strictly left-to-right over
the contracted index and is therefore bit-identical to a naive triple loop
and across BLAS builds; the bitwise matmul oracle tests rely on that mode.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
# RODIMUS_DETERMINISTIC=1 forces a fixed left-to-right summation order in
# matmul (bitwise reproducible across BLAS builds, but much slower).  The
# default BLAS path is still run-to-run deterministic on a given platform.
_deterministic = os.environ.get("RODIMUS_DETERMINISTIC", "0") == "1"


def set_default_dtype(name: str) -> None:
    """Switch global precision ("float64" or "float32")."""
    global _default_dtype
    if name not in _DTYPES:
        raise DomainError(f"unknown dtype {name!r}; expected float64 or float32")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_deterministic(flag: bool) -> None:
    """Toggle the fixed left-to-right summation order in matmul.

    On: contraction runs in a strictly defined element order, so results are
    bitwise identical across BLAS builds and to a naive-loop oracle.  Off
    (default): BLAS matmul — faster, reproducible run-to-run on one platform.
    """
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense array plus an optional node in the backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Gradients accumulate additively across fan-out; the tape is walked in
        reverse topological order, visiting each node exactly once.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar -------------------------------------------------------

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
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(x: Tensor, name: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"tensor {name!r} contains non-finite values")


# -- elementwise suite --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data + b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data - b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = a.data * b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return Tensor._result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = astensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def texp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def powc(a, c: float) -> Tensor:
    """x**c for strictly positive x and a constant exponent."""
    a = astensor(a)
    if np.any(a.data <= 0):
        raise DomainError("powc requires a positive base")
    out = a.data**c
    return Tensor._result(out, (a,), lambda g: (g * c * a.data ** (c - 1.0),))


def tpow(base, exponent) -> Tensor:
    """base**exponent via exp(exponent * log(base)); base must be positive."""
    base, exponent = astensor(base), astensor(exponent)
    if np.any(base.data <= 0):
        raise DomainError("pow requires a positive base")
    logb = np.log(base.data)
    out = np.exp(exponent.data * logb)
    return Tensor._result(
        out,
        (base, exponent),
        lambda g: (
            _unbroadcast(g * out * exponent.data / base.data, base.shape),
            _unbroadcast(g * out * logb, exponent.shape),
        ),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return Tensor._result(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    a = astensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    s = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * s,))


def clip_min(a, lo: float) -> Tensor:
    """max(x, lo); gradient passes where x >= lo."""
    a = astensor(a)
    out = np.maximum(a.data, lo)
    mask = (a.data >= lo).astype(a.data.dtype)
    return Tensor._result(out, (a,), lambda g: (g * mask,))


# -- contractions and reductions ----------------------------------------------


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _deterministic:
        return np.einsum("...pq,...qr->...pr", a, b, optimize=False)
    return np.matmul(a, b)


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _mm(a.data, b.data)

    def vjp(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2))
        gb = _mm(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis: int) -> Tensor:
    a = astensor(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev,)

    return Tensor._result(out, (a,), vjp)


# -- shape manipulation -------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = astensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = astensor(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = astensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.asarray(out), (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return Tensor._result(out, tensors, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, vjp)


# -- fused numeric kernels ----------------------------------------------------


def softmax_lastdim(x, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Row-wise softmax over the last axis with an optional additive {0, -inf} mask.

    Masked entries come out exactly 0.  A fully masked row is an error: there
    is no attendable token.
    """
    x = astensor(x)
    logits = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        logits = logits + m
    if np.any(np.all(np.isneginf(logits), axis=-1)):
        raise DomainError("softmax row is fully masked")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(np.isneginf(logits), 0.0, e)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (x,), vjp)


def log_softmax_lastdim(x) -> Tensor:
    x = astensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), vjp)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if eps < 0:
        raise DomainError("rmsnorm eps must be >= 0")
    x, gain = astensor(x), astensor(gain)
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = powc(add(ms, eps), -0.5) if eps > 0 else powc(ms, -0.5)
    return mul(mul(x, inv), gain)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Unit L2 norm over the last axis."""
    x = astensor(x)
    ss = tsum(mul(x, x), axis=-1, keepdims=True)
    return mul(x, powc(add(ss, eps), -0.5))


def causal_conv1d(x, kernel, bias, init: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along the time axis.

    ``x`` is [..., T, c], ``kernel`` is [w, c], ``bias`` is [c].  Positions
    before the sequence read from ``init`` ([..., w-1, c], default zeros), so
    streaming decode can carry a tail of the last w-1 inputs.  Output position
    t only sees inputs at positions <= t.
    """
    x, kernel, bias = astensor(x), astensor(kernel), astensor(bias)
    w = kernel.shape[0]
    if w < 1:
        raise DomainError("conv kernel width must be >= 1")
    T = x.shape[-2]
    c = x.shape[-1]
    if kernel.shape[1] != c or bias.shape != (c,):
        raise ShapeError(f"conv kernel/bias {kernel.shape}/{bias.shape} vs channels {c}")
    if init is None:
        pad_shape = x.shape[:-2] + (w - 1, c)
        padded = np.concatenate([np.zeros(pad_shape, dtype=x.data.dtype), x.data], axis=-2)
    else:
        if init.shape[-2:] != (w - 1, c):
            raise ShapeError(f"conv init must be [..., {w - 1}, {c}], got {init.shape}")
        padded = np.concatenate([np.broadcast_to(init.data, x.shape[:-2] + (w - 1, c)), x.data], axis=-2)
    out = np.zeros_like(x.data)
    for j in range(w):
        out = out + kernel.data[j] * padded[..., j : j + T, :]
    out = out + bias.data

    def vjp(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for j in range(w):
            gpad[..., j : j + T, :] += kernel.data[j] * g
            red = tuple(range(g.ndim - 2))
            gk[j] = (g * padded[..., j : j + T, :]).sum(axis=red + (g.ndim - 2,))
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        gx = gpad[..., w - 1 :, :]
        gi = None
        if init is not None:
            gi = _unbroadcast(gpad[..., : w - 1, :], init.shape)
        return (gx, gk, gb) if init is None else (gx, gk, gb, gi)

    parents = (x, kernel, bias) if init is None else (x, kernel, bias, init)
    return Tensor._result(out, parents, vjp)


def embedding_lookup(table, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds in index order (deterministic)."""
    table = astensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(out, (table,), vjp)


def gather_last(x, idx: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis; idx shape == x.shape[:-1]."""
    x = astensor(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._result(out, (x,), vjp)


# -- verification oracle ------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise DomainError("finite difference step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Run backward and return the gradient of each requested leaf."""
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
