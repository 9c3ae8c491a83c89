"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous row-major numpy array. Every op builds its output
through `_result`, which records the parents and a backward closure only when
gradients are enabled and at least one parent requires them. `backward` walks
the recorded graph once in reverse topological order and accumulates into the
`.grad` of leaf tensors.

Precision is thread-local: float64 in "verify" mode (the default, so that
finite-difference and oracle comparisons are meaningful) and float32 in
"train" mode.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from svlb.errors import ContractError, DimensionError, NormalizationError, NumericInputError, TargetIndexError

PRECISIONS = {"verify": np.float64, "train": np.float32}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

_GELU_C = math.sqrt(2.0 / math.pi)


class _Mode(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float64
        self.grad_enabled = True


_mode = _Mode()


@contextmanager
def precision(mode: str) -> Iterator[None]:
    if mode not in PRECISIONS:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    prev = _mode.dtype
    _mode.dtype = PRECISIONS[mode]
    try:
        yield
    finally:
        _mode.dtype = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


def default_dtype() -> np.dtype:
    return np.dtype(_mode.dtype)


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = np.ascontiguousarray(np.array(data, dtype=dtype or _mode.dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def swapaxes(self, a: int, b: int): return swapaxes(self, a, b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.grad = None
    track = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    out.op = op
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    """Register an op defined outside this module (rotary embeddings use it)."""
    return _result(data, parents, backward, op)


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, size in enumerate(shape):
        if size == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def _back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)
    return _result(out, (x,), _back, "gelu")


def log_sigmoid(x: Tensor) -> Tensor:
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))
    # d/dx log(sigmoid(x)) = sigmoid(-x)
    return _result(out, (x,), lambda g: (g * 0.5 * (1.0 - np.tanh(0.5 * x.data)),), "log_sigmoid")


# shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None

    def _back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(out, (a, b), _back, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", x.shape, tuple(shape)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, idx) -> Tensor:
    """Indexing (basic slices or integer arrays); gradients scatter-add back."""
    out = x.data[idx]

    def _back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _result(out, (x,), _back, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("stack", *(t.shape for t in tensors)) from None
    return _result(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(out, (x,), _back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# normalization and probability

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-subtracted softmax. `mask` (True = keep) zeroes probabilities exactly."""
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("softmax received non-finite input")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ContractError("softmax mask leaves a row with no admissible entry")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError("log_softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100, reduction: str = "mean") -> Tensor:
    """Mean (or summed) negative log-likelihood over non-ignored rows.

    `logits` is [..., V]; `targets` has the leading shape. With every row
    ignored the result is 0 and the gradient is zero.
    """
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction {reduction!r}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError("cross_entropy", logits.shape, np.shape(targets))
    valid = tgt != ignore_index
    if np.any((tgt[valid] < 0) | (tgt[valid] >= vocab)):
        raise TargetIndexError(f"cross_entropy target outside [0, {vocab})")
    if not np.all(np.isfinite(flat)):
        raise NumericInputError("cross_entropy received non-finite logits")
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "cross_entropy")

    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.nonzero(valid)[0]
    nll = lse[rows] - shifted[rows, tgt[rows]]
    scale = 1.0 / count if reduction == "mean" else 1.0
    out = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def _back(g):
        grad = np.exp(shifted - lse[:, None])
        grad[rows, tgt[rows]] -= 1.0
        grad[~valid] = 0.0
        return ((grad * (g * scale)).reshape(logits.shape),)
    return _result(out, (logits,), _back, "cross_entropy")


def mse(pred: Tensor, target: ArrayLike) -> Tensor:
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise DimensionError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _result(out, (pred, target), lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n), "mse")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def _back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(out, (x, gain, bias), _back, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NormalizationError("cannot L2-normalize a zero-norm row")
    out = x.data / norm
    return _result(out, (x,), lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,), "l2_normalize")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if np.any((ids < 0) | (ids >= table.shape[0])):
        raise TargetIndexError(f"embedding id outside [0, {table.shape[0]})")
    out = table.data[ids]

    def _back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)
    return _result(out, (table,), _back, "embedding")
