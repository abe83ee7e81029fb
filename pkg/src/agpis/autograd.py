"""Small reverse-mode autodiff engine on top of numpy (float64).

Every op builds a node holding its parents and a closure that maps the
upstream gradient to parent gradients. ``backward`` replays nodes in
reverse creation order, so gradient sums are taken in a fixed order and
repeated runs are bitwise identical.

Broadcasting is deliberately narrow: operands must have equal shapes, one
of them must be a scalar, or the right operand's shape must be a suffix of
the left operand's shape (bias rows added over leading batch dimensions).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "mul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "cross_entropy_logits",
    "bce_logits",
    "gather_rows",
    "take_positions",
    "concat",
    "dropout",
    "backward",
    "grad_check",
]

_node_ids = itertools.count()
_state = threading.local()

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
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

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None  # allocated lazily during backward
    out.node_id = next(_node_ids)
    out.op = op
    out._parents = parents
    out._backward = backward_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad**p, (a,), "pow", bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), "gelu", bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep
    return _make(a.data * mask, (a,), "dropout", lambda g: (g * mask,))


# -- shape ops ---------------------------------------------------------------
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), "concat", bw)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row id out of range for table with {n} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _make(table.data[ids], (table,), "gather", bw)


def take_positions(x: Tensor, positions) -> Tensor:
    """Pick one row per batch element: ``x[b, positions[b]]`` for x of shape [B, L, D]."""
    pos = np.asarray(positions, dtype=np.int64)
    b = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[b, pos] = g
        return (out,)

    return _make(x.data[b, pos], (x,), "take", bw)


# -- reductions --------------------------------------------------------------
def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (a,), "sum", bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across all leading dimensions of
    ``a``, or carries the same leading dimensions as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2 and a.ndim > 2

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), "matmul", bw)


# -- normalisation / probability ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), "log_softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), "layer_norm", bw)


def cross_entropy_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``weights`` (optional, one per row) turns the mean into a weighted sum
    normalised by the row count; rows with weight 0 are ignored.
    """
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    c = logits.shape[-1]
    x = logits.data.reshape(-1, c)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {x.shape[0]} rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target out of range [0, {c})")
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, t]
    loss = float((w * nll).sum()) / n
    shape = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        p *= (w / n)[:, None] * g
        return (p.reshape(shape),)

    return _make(np.asarray(loss), (logits,), "cross_entropy", bw)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy for single-logit outputs."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    loss = float(np.mean(np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))))
    n = x.size

    def bw(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((p - y) * (g / n),)

    return _make(np.asarray(loss), (logits,), "bce", bw)


# -- graph traversal ---------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    # reverse creation order; node ids grow monotonically with creation
    order.sort(key=lambda t: t.node_id, reverse=True)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in order:
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tensor to a scalar tensor. ``x`` is left untouched.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if not out.requires_grad:
        analytic = np.zeros_like(base)
    else:
        backward(out)
        analytic = leaf.grad
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def parameters_grad_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
    max_coords: int | None = None, rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but over tensors already wired into ``loss_fn``.

    Perturbs parameter data in place (restored afterwards). With
    ``max_coords`` only that many coordinates per tensor are probed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            r = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(r.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        analytic = p.grad.reshape(-1)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
    return worst
