"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input participates in gradients. :func:`backward` replays the tape in
reverse and returns gradients for every participating leaf.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)[x.id].item()
    6.0
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5

_ids = itertools.count()
_tapes: list[Tape] = []
_grad_mode = [True]


class Tensor:
    """A float64 array with optional participation in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations for one backward pass."""

    records: list[Record] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)

    def __enter__(self) -> Tape:
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def record(self, op, inputs, output, fn) -> None:
        self.records.append(Record(op, inputs, output, fn))
        self._produced.add(output.id)

    def produced(self, t: Tensor) -> bool:
        return t.id in self._produced


@contextmanager
def no_grad():
    """Suspend recording; results never participate in gradients."""
    _grad_mode.append(False)
    try:
        yield
    finally:
        _grad_mode.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], fn) -> Tensor:
    track = _grad_mode[-1] and bool(_tapes) and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=track)
    if track:
        _tapes[-1].record(op, inputs, out, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every participating leaf on ``tape``.

    Leaf tensors also receive the gradient in their ``grad`` attribute. Leaves
    that do not influence the loss get no entry.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if not tape.produced(t):
                leaves[t.id] = t
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi
    out = {}
    for i, t in leaves.items():
        t.grad = grads[i]
        out[i] = grads[i]
    return out


# ---------------------------------------------------------------- primitives


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, no gradient path back to ``t``."""
    return Tensor(t.data, requires_grad=False)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        c = float(b)
        a = as_tensor(a)
        return _emit("scale", a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    def fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _emit("silu", xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def fn(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), fn)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``-permitted keys.

    ``mask`` is boolean and broadcasts against ``scores``; forbidden entries are
    exactly zero. Raises if any query row has no permitted key.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a query row with no permitted key")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", p, (scores,), fn)


def mse(a: Tensor, b, weight: np.ndarray | None = None) -> Tensor:
    """Mean of squared differences over all elements (a scalar).

    ``weight`` is an optional constant array broadcast against the difference,
    e.g. per-batch-element timestep weights of shape (B, 1, 1).
    """
    b = as_tensor(b)
    diff = a.data - b.data
    n = diff.size
    wd = diff if weight is None else np.asarray(weight, dtype=np.float64) * diff

    def fn(g):
        gd = (2.0 * g / n) * wd
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)

    return _emit("mse", np.array((wd * diff).mean()), (a, b), fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: np.split(g, splits, axis=axis))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,),
                 lambda g: (g.transpose(inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("take", x.data[index], (x,), fn)


# ---------------------------------------------------------------- helpers


def sinusoidal_embed(tau, dim: int) -> np.ndarray:
    """Transformer-style timestep embedding, sin block then cos block.

    ``tau`` may be a float or an array; the embedding is appended as a new
    trailing axis of length ``dim``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    ang = np.asarray(tau, dtype=np.float64)[..., None] * _embed_freqs(dim)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@lru_cache(maxsize=None)
def _embed_freqs(dim: int) -> np.ndarray:
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    freqs.setflags(write=False)
    return freqs


@dataclass
class LinearBlock:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def linear_zero_init(in_dim: int, out_dim: int) -> LinearBlock:
    """Linear layer whose weight and bias start at exactly 0.0."""
    if in_dim <= 0 or out_dim <= 0:
        raise ValueError("linear dims must be positive")
    return LinearBlock(Tensor(np.zeros((in_dim, out_dim))), Tensor(np.zeros(out_dim)))


def linear_init(in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 1.0) -> LinearBlock:
    w = rng.normal(0.0, gain / math.sqrt(in_dim), size=(in_dim, out_dim))
    return LinearBlock(Tensor(w), Tensor(np.zeros(out_dim)))
