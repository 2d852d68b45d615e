"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float64 ndarray.  Operations executed while a ``Tape`` is
active append one node per op; ``Tape.backward`` replays the nodes in reverse
execution order (execution order is a topological order by construction) and
accumulates adjoints into ``Tensor.grad``.  With no active tape, ops are plain
forward computations and build no graph.

All arithmetic is double precision.  ``grad_check`` compares analytic
gradients against central finite differences and is the reference harness for
every differentiable loss in the package.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-5  # layer_norm variance floor


class Tensor:
    """A float64 array plus an adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.parents = parents
        self.fn = fn


class Tape:
    """Ordered record of executed ops; backward replays it once, reversed."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into .grad of every reachable tensor."""
        if root.data.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {root.data.shape}")
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2; reshape vectors explicitly")
    out = Tensor(a.data @ b.data)

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather slices along ``axis``; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("index_select expects a 1-D index array")
    out = Tensor(np.take(a.data, idx, axis=axis))

    def fn(g):
        gx = np.zeros_like(a.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _record(out, (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), fn)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def fn(g):
        if axis is None:
            return (np.full_like(a.data, 1.0 / count) * g,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape) / count,)

    return _record(out, (a,), fn)


def total(a: Tensor) -> Tensor:
    """Sum of all elements."""
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(a: Tensor) -> Tensor:
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-shifting."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Uses the population variance (divide by n, not n-1).
    """
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise DimensionError(
            f"layer_norm scale/shift must have shape ({n},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross entropy on raw logits (numerically stable)."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss)

    def fn(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - t),)

    return _record(out, (logits,), fn)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Per-row categorical cross entropy over the last axis of ``logits``.

    ``labels`` holds integer class ids with shape ``logits.shape[:-1]``.
    """
    y = np.asarray(labels, dtype=np.int64)
    x = logits.data
    if y.shape != x.shape[:-1]:
        raise DimensionError(f"labels shape {y.shape} does not match logits rows {x.shape[:-1]}")
    m = x.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    picked = np.take_along_axis(x, y[..., None], axis=-1)[..., 0]
    out = Tensor(lse - picked)

    def fn(g):
        s = np.exp(x - m)
        s /= s.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(x)
        np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
        return ((s - onehot) * g[..., None],)

    return _record(out, (logits,), fn)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between the last-axis vectors of ``a`` and ``b``.

    Norms must be strictly positive; callers needing a degenerate-input
    guard should test norms before invoking this op.
    """
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericError("cosine_similarity is undefined for zero-norm inputs")
    dot = (a.data * b.data).sum(axis=-1)
    c = dot / (na * nb)
    out = Tensor(c)

    def fn(g):
        ga = (b.data / (na * nb)[..., None] - a.data * (c / (na * na))[..., None]) * g[..., None]
        gb = (a.data / (na * nb)[..., None] - b.data * (c / (nb * nb))[..., None]) * g[..., None]
        return ga, gb

    return _record(out, (a, b), fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    diff = sub(pred, as_tensor(target))
    return mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued closure over ``params``; it is
    re-evaluated (forward only) with each parameter entry perturbed by
    ``±step``.  The relative error for one entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    with Tape() as tape:
        out = f()
    if out.data.size != 1:
        raise DimensionError("grad_check target must be scalar-valued")
    if not np.isfinite(out.data):
        raise NumericError("grad_check target evaluated to a non-finite value")
    for p in params.values():
        p.grad = None
    tape.backward(out)

    worst = 0.0
    for p in params.values():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("grad_check perturbation produced a non-finite value")
            numeric = (up - down) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            if err > worst:
                worst = err
    return worst
