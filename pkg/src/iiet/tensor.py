"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operators the micro language model needs are provided. Each operator
computes its forward value eagerly and, when any input requires a gradient,
appends a node to the thread-local tape. ``backward`` walks the tape in strict
reverse append order and clears it afterwards.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "ConfigurationError",
    "tensor",
    "parameter",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "finite_checks",
    "current_graph",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "concat",
    "transpose",
    "reshape",
    "permute",
    "getitem",
    "total",
    "mean",
    "silu",
    "rms_norm",
    "embedding",
    "rope_apply",
    "causal_attention",
    "linear_combination",
    "softmax_cross_entropy",
    "mse",
    "kl_with_temperature",
    "backward",
    "grad_check",
]

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class ConfigurationError(ValueError):
    """An operator was called with an invalid configuration."""


_local = threading.local()


def _flag(name, default):
    return getattr(_local, name, default)


def get_default_dtype():
    return _flag("dtype", np.float64)


@contextmanager
def default_dtype(dtype):
    """Set the float dtype used for tensors built from Python data."""
    prev = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def no_grad():
    prev = _flag("grad_enabled", True)
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-operation NaN/Inf check (on by default)."""
    prev = _flag("check_finite", True)
    _local.check_finite = enabled
    try:
        yield
    finally:
        _local.check_finite = prev


@dataclass
class _Node:
    tag: str
    inputs: tuple
    out: "Tensor"
    backward: Callable


@dataclass
class Graph:
    """Append-only tape of recorded operations."""

    nodes: list = field(default_factory=list)

    def record(self, tag, out, inputs, backward_fn):
        out.node = len(self.nodes)
        self.nodes.append(_Node(tag, tuple(inputs), out, backward_fn))

    def clear(self):
        for n in self.nodes:
            n.out.node = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


class Tensor:
    """Dense array with an optional gradient slot and tape identity."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        name = f" {self.name!r}" if self.name else ""
        return f"Tensor{name}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, dtype=None, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True, name=name)


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, tag, backward_fn) -> Tensor:
    out = Tensor(data)
    if _flag("check_finite", True) and not np.isfinite(data).all():
        raise NonFiniteError(f"{tag} produced non-finite values")
    if _flag("grad_enabled", True) and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(tag, out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, tag):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------- #
# Elementwise arithmetic
# --------------------------------------------------------------------------- #


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


# --------------------------------------------------------------------------- #
# Linear algebra and shape manipulation
# --------------------------------------------------------------------------- #


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; both operands 2-D is the plain contraction."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def bw(g):
        da = g @ bd.T
        db = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return da, db

    return _make(ad @ bd, (a, b), "matmul", bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat",
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), "permute", lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src, dtype = a.shape, a.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) for i in parts)

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), "getitem", bw)


def total(a: Tensor) -> Tensor:
    src = a.shape
    return _make(a.data.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, src),))


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.data.size
    return _make(a.data.mean(), (a,), "mean", lambda g: (np.broadcast_to(g / n, src),))


# --------------------------------------------------------------------------- #
# Network operators
# --------------------------------------------------------------------------- #


def _sigmoid(x):
    # tanh form is overflow-free for any finite x
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def bw(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make(xd * s, (x,), "silu", bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Scale each trailing vector to unit root-mean-square, then apply ``gain``."""
    d = x.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match last extent of {x.shape}")
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dxhat = g * gd
        dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain

    return _make(xhat * gd, (x, gain), "rms_norm", bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {weight.shape[0]}")
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        dw = np.zeros(shape, dtype=dtype)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (dw,)

    return _make(weight.data[ids], (weight,), "embedding", bw)


def _rope_tables(positions, half, dtype):
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions) -> Tensor:
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` by ``pos * base**(-2k/d)``.

    ``x`` has shape ``[..., T, d_head]``; ``positions`` has length ``T``.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ConfigurationError(f"rotary embedding needs an even head dimension, got {dh}")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"rope_apply: {len(positions)} positions for sequence axis of {x.shape}")
    cos, sin = _rope_tables(positions, dh // 2, x.dtype)

    def rotate(arr, s):
        pairs = arr.reshape(*arr.shape[:-1], dh // 2, 2)
        a, b = pairs[..., 0], pairs[..., 1]
        out = np.empty_like(pairs)
        out[..., 0] = a * cos - b * s
        out[..., 1] = a * s + b * cos
        return out.reshape(arr.shape)

    return _make(rotate(x.data, sin), (x,), "rope", lambda g: (rotate(g, -sin),))


_MASKS: dict = {}


def _causal_mask(tq, tk, offset, dtype):
    key = (tq, tk, offset, np.dtype(dtype).str)
    m = _MASKS.get(key)
    if m is None:
        qpos = offset + np.arange(tq)[:, None]
        kpos = np.arange(tk)[None, :]
        m = np.where(kpos > qpos, -np.inf, 0.0).astype(dtype)
        if len(_MASKS) > 64:
            _MASKS.clear()
        _MASKS[key] = m
    return m


def causal_attention(q: Tensor, k: Tensor, v: Tensor, offset: int = 0) -> Tensor:
    """Scaled dot-product attention with an additive causal mask.

    Shapes are ``[B, h, Tq, d]`` for ``q`` and ``[B, h, Tk, d]`` for ``k``/``v``.
    Query ``i`` sits at absolute position ``offset + i`` and sees keys up to it.
    """
    if q.shape[:2] != k.shape[:2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    tq, tk = qd.shape[-2], kd.shape[-2]
    if offset + tq > tk:
        raise ShapeError(f"attention: {tq} queries at offset {offset} exceed {tk} keys")
    scale = 1.0 / math.sqrt(qd.shape[-1])
    qs = qd * scale
    p = qs @ kd.swapaxes(-1, -2)
    p += _causal_mask(tq, tk, offset, qd.dtype)
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        dv = p.swapaxes(-1, -2) @ g
        ds = g @ vd.swapaxes(-1, -2)
        ds -= (ds * p).sum(axis=-1, keepdims=True)
        ds *= p
        return (ds @ kd) * scale, ds.swapaxes(-1, -2) @ qs, dv

    return _make(p @ vd, (q, k, v), "attention", bw)


def linear_combination(base: Tensor, coeffs: Tensor, entries: Sequence[Tensor]) -> Tensor:
    """``base + sum_j coeffs[j] * entries[j]``, accumulated in the given order."""
    if coeffs.shape != (len(entries),):
        raise ShapeError(f"linear_combination: {coeffs.shape} coefficients for {len(entries)} entries")
    c = coeffs.data
    out = base.data.copy()
    for cj, e in zip(c, entries):
        if e.shape != base.shape:
            raise ShapeError(f"linear_combination: entry {e.shape} vs base {base.shape}")
        out += cj * e.data
    datas = [e.data for e in entries]

    def bw(g):
        dc = np.array([np.vdot(g, e) for e in datas], dtype=c.dtype)
        return (g, dc, *(cj * g for cj in c))

    return _make(out, (base, coeffs, *entries), "merge", bw)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [B, V] logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets).reshape(-1)
    if t.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range for {v} classes")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the leading axis of squared L2 norms of row differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    diff = a.data - b.data
    val = (diff.reshape(n, -1) ** 2).sum() / n

    def bw(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return _make(np.asarray(val, dtype=a.dtype), (a, b), "mse", bw)


def kl_with_temperature(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """Mean over rows of ``KL(softmax(teacher/tau) || softmax(student/tau))``.

    The teacher side never receives a gradient.
    """
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    tdata = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if tdata.shape != student_logits.shape:
        raise ShapeError(f"kl: shape mismatch {tdata.shape} vs {student_logits.shape}")
    v = tdata.shape[-1]
    lt = _log_softmax(tdata.reshape(-1, v) / tau)
    ls = _log_softmax(student_logits.data.reshape(-1, v) / tau)
    pt = np.exp(lt)
    n = lt.shape[0]
    val = max((pt * (lt - ls)).sum() / n, 0.0)
    shape = student_logits.shape

    def bw(g):
        return (((np.exp(ls) - pt) * (g / (tau * n))).reshape(shape),)

    return _make(np.asarray(val, dtype=student_logits.dtype), (student_logits,), "kl", bw)


# --------------------------------------------------------------------------- #
# Reverse pass and gradient checking
# --------------------------------------------------------------------------- #


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    The tape is cleared afterwards, so each forward pass supports one
    backward pass. Leaf gradients accumulate across calls until zeroed.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    graph = current_graph()
    if loss.node is None:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = np.array(gi, dtype=t.dtype) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    graph.clear()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6, max_coords=None, seed=0) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``max_coords`` only that many coordinates per parameter are probed,
    chosen deterministically from ``seed``.
    """
    for p in params:
        p.grad = None
    current_graph().clear()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            p.data = np.array(p.data, copy=True)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                err = abs(a.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
