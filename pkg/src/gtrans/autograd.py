"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active, so code that
runs outside ``with Tape():`` is effectively in no-grad mode. Leaf tensors
(those created directly rather than produced by an op) accumulate gradients
into ``.grad``; intermediate gradients live only for the duration of a
backward pass.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ParameterError",
    "NonFiniteError",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "backward",
    "finite_diff_grad",
    "matmul",
    "linear",
    "layer_norm",
    "softmax",
    "softmax_t",
    "log_softmax",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "embedding",
    "gather_last",
    "dropout",
    "nll_loss",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_state = threading.local()
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose inputs
    require gradients is appended in execution order.
    """

    def __init__(self) -> None:
        self.records: list[tuple[int, tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, inputs: tuple["Tensor", ...], fn: Callable) -> int:
        node_id = len(self.records)
        self.records.append((node_id, inputs, fn))
        return node_id

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss._is_leaf:
            if loss.requires_grad:
                loss.grad += seed
            return
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: seed}
        for node_id, inputs, fn in reversed(self.records):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._is_leaf:
                    t.grad += gi
                else:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.dtype.kind != "f":
            raise TypeError(f"tensors hold real values, got dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = None
        self._tape = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable, name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._is_leaf = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out.node_id = tape._record(inputs, fn)
    else:
        out.requires_grad = False
        out._tape = None
        out.node_id = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1 and shape[0] == grad.shape[-1] and grad.ndim > 1:
        return _lead_sum(grad)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@functools.lru_cache(maxsize=256)
def _ones(n: int, dtype) -> np.ndarray:
    out = np.ones(n, dtype=dtype)
    out.flags.writeable = False
    return out


# Reductions as BLAS products: several times faster than ufunc.reduce for
# the short rows and tall columns used here.
def _last_sum(x: np.ndarray) -> np.ndarray:
    return (x @ _ones(x.shape[-1], x.dtype))[..., None]


def _last_mean(x: np.ndarray) -> np.ndarray:
    return _last_sum(x) * (1.0 / x.shape[-1])


def _lead_sum(x: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last."""
    x2 = x.reshape(-1, x.shape[-1])
    return _ones(x2.shape[0], x.dtype) @ x2


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every gradient-requiring leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._is_leaf:
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
        return
    if loss._tape is None:
        raise ValueError("loss does not depend on any recorded gradient-requiring tensor")
    loss._tape.backward(loss)


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    return a, b


# unary functions


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return _result(out, (x,), lambda g: (g * (xd > 0),), "relu")


# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(np.array(x.data[index]), (x,), fn, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, fn, "stack")


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    # a weight shared over the batch: fold leading axes into a single GEMM
    fold = bd.ndim == 2 and ad.ndim > 2
    try:
        if fold:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
        else:
            out = ad @ bd
    except ValueError as err:
        raise ShapeError(str(err)) from None

    def fn(g):
        ga = gb = None
        if fold:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` as one op; ``weight`` is ``(D_in, D_out)``."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or bias.shape != wd.shape[1:]:
        raise ShapeError(f"linear shapes do not agree: {xd.shape}, {wd.shape}, {bias.shape}")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    out += bias.data
    out = out.reshape(xd.shape[:-1] + wd.shape[1:])

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = _ones(g2.shape[0], g2.dtype) @ g2 if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), fn, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    xd = x.data
    if xd.ndim == 0 or xd.shape[-1] == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gamma.shape != xd.shape[-1:] or beta.shape != xd.shape[-1:]:
        raise ShapeError(f"layer_norm affine params must have shape {xd.shape[-1:]}")
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    xc = xd - _last_mean(xd)
    rstd = 1.0 / np.sqrt(_last_mean(xc * xc) + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd
    out += beta.data

    def fn(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gxhat = g * gd
            gx = gxhat - _last_mean(gxhat)
            gx -= xhat * _last_mean(gxhat * xhat)
            gx *= rstd
        if gamma.requires_grad:
            ggamma = _lead_sum(g * xhat)
        if beta.requires_grad:
            gbeta = _lead_sum(g)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), fn, "layer_norm")


def softmax(x: Tensor, tau: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Temperature softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks attendable entries; masked
    entries get probability exactly zero. A row with nothing attendable is an
    input error.
    """
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau if tau != 1.0 else x.data
    if mask is not None:
        if not np.broadcast_to(mask, z.shape).any(axis=-1).all():
            raise ValueError("attention mask has a row with no attendable column")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if out.dtype != x.data.dtype:
        out = out.astype(x.data.dtype)

    def fn(g):
        return ((out * (g - (g * out).sum(axis=-1, keepdims=True))) / tau,)

    return _result(out, (x,), fn, "softmax")


def softmax_t(logits: Tensor, tau: float) -> Tensor:
    return softmax(logits, tau=tau)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), fn, "log_softmax")


# indexing


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for table of {weight.shape[0]} rows")
    wshape, dtype = weight.shape, weight.data.dtype

    def fn(g):
        gw = np.zeros(wshape, dtype=dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), fn, "embedding")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., ] = x[..., index[...]]`` picking one entry of the last axis."""
    index = np.asarray(index)[..., None]
    shape, dtype = x.shape, x.data.dtype

    def fn(g):
        gx = np.zeros(shape, dtype=dtype)
        np.put_along_axis(gx, index, g[..., None], axis=-1)
        return (gx,)

    return _result(np.take_along_axis(x.data, index, axis=-1)[..., 0], (x,), fn, "gather")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller decides whether the model is training."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ParameterError("dropout rate must be < 1")
    # 16-bit uniform draws from raw bytes: ~4x cheaper than float sampling
    threshold = int(round(rate * 65536))
    bits = np.frombuffer(rng.bytes(2 * x.data.size), dtype="<u2").reshape(x.shape)
    keep = (bits >= threshold).astype(x.data.dtype)
    keep *= 65536.0 / (65536 - threshold)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def nll_loss(log_probs: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions."""
    targets = np.asarray(targets)
    if log_probs.shape[:-1] != targets.shape:
        raise ShapeError(f"targets {targets.shape} do not align with {log_probs.shape}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every target position is padding")
    vocab = log_probs.shape[-1]
    if targets[keep].max() >= vocab or targets[keep].min() < 0:
        raise IndexError(f"target id out of range for vocabulary of {vocab}")
    picked = gather_last(log_probs, np.where(keep, targets, 0))
    weights = Tensor(keep, dtype=log_probs.data.dtype)
    return -(picked * weights).sum() * (1.0 / count)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of d f(x) / d x, one coordinate at a time.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ParameterError("finite-difference step must be positive")

    def value() -> float:
        out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad.astype(x.data.dtype)
