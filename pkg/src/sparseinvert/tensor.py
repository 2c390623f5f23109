"""Taped reverse-mode autodiff over numpy arrays.

Everything is float64. A Graph is rebuilt for every forward pass and
consumed by a single backward() call. Gradients flow only into tensors
that were explicitly watch()ed on the graph (or derived from one), so a
frozen-weight forward does no weight-gradient work.

Reductions are plain sequential numpy reductions, so repeated runs with
the same inputs are bit-identical.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


class LabelOutOfRange(IndexError):
    pass


class GraphConsumed(RuntimeError):
    pass


class DegenerateRow(ArithmeticError):
    pass


class NonFiniteValue(ArithmeticError):
    pass


_state = threading.local()


def checked_mode() -> bool:
    return getattr(_state, "checked", False)


def set_checked(flag: bool) -> None:
    _state.checked = bool(flag)


@contextmanager
def checked():
    """Trap NaN/Inf in op outputs (and degenerate layernorm rows) while active."""
    old = checked_mode()
    set_checked(True)
    try:
        yield
    finally:
        set_checked(old)


def _guard(data: np.ndarray, opname: str) -> None:
    if checked_mode() and not np.all(np.isfinite(data)):
        raise NonFiniteValue(f"{opname} produced a non-finite value")


class Tensor:
    """A float64 array plus an optional handle into a recording Graph."""

    __slots__ = ("data", "grad", "graph", "node_id")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.graph = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.graph is None else f" node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Graph:
    """Records one forward pass; one backward() then the tape is dead.

    ``macs`` maps matmul scope tags to exact multiply-accumulate counts,
    accumulated at record time.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False
        self.macs: dict[str, int] = {}

    def watch(self, t: Tensor) -> Tensor:
        if t.graph is self:
            return t
        if t.graph is not None:
            raise ValueError("tensor already belongs to another graph")
        t.graph = self
        t.node_id = len(self._nodes)
        self._nodes.append(_Node(t, None))
        return t

    def _record(self, out: Tensor, backward) -> Tensor:
        out.graph = self
        out.node_id = len(self._nodes)
        self._nodes.append(_Node(out, backward))
        return out

    def _count(self, tag: str | None, n: int) -> None:
        if tag is not None:
            self.macs[tag] = self.macs.get(tag, 0) + n

    @property
    def consumed(self) -> bool:
        return self._consumed

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise GraphConsumed("graph already back-propagated; rebuild the forward pass")
        if loss.graph is not self or loss.node_id is None:
            raise ValueError("loss tensor is not recorded on this graph")
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes[: loss.node_id + 1]):
            if node.backward is None:
                continue
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


def release(tensors) -> None:
    """Unbind long-lived leaves (parameters) from a consumed graph so they
    can be watched again on the next one."""
    for t in tensors:
        t.graph = None
        t.node_id = None
        t.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.node_id is None:
        return
    if t.grad is None:
        # Views must be detached: later += would write through to the source.
        t.grad = g if g.base is None else g.copy()
    else:
        t.grad += g


def _graph_of(*ts: Tensor):
    g = None
    for t in ts:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise ValueError("operands recorded on different graphs")
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, g, backward, opname: str) -> Tensor:
    _guard(data, opname)
    out = Tensor(data)
    if g is not None:
        g._record(out, backward)
    return out


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    g = _graph_of(a, b)
    if g is None:
        return _make(data, None, None, "add")

    def bw(gout):
        _accum(a, _unbroadcast(gout, a.data.shape))
        _accum(b, _unbroadcast(gout, b.data.shape))

    return _make(data, g, bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    g = _graph_of(a, b)
    if g is None:
        return _make(data, None, None, "sub")

    def bw(gout):
        _accum(a, _unbroadcast(gout, a.data.shape))
        _accum(b, _unbroadcast(-gout, b.data.shape))

    return _make(data, g, bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    g = _graph_of(a, b)
    if g is None:
        return _make(data, None, None, "mul")
    ad, bd = a.data, b.data

    def bw(gout):
        _accum(a, _unbroadcast(gout * bd, ad.shape))
        _accum(b, _unbroadcast(gout * ad, bd.shape))

    return _make(data, g, bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "scale")

    def bw(gout):
        _accum(a, gout * c)

    return _make(data, g, bw, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims.

    ``tag`` buckets the exact MAC count (batch * m * k * n) on the graph.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul operands must have ndim >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    data = ad @ bd
    g = _graph_of(a, b)
    if g is None:
        return _make(data, None, None, "matmul")
    m, k = ad.shape[-2], ad.shape[-1]
    n = bd.shape[-1]
    batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
    g._count(tag, batch * m * k * n)

    def bw(gout):
        if a.node_id is not None:
            _accum(a, _unbroadcast(gout @ np.swapaxes(bd, -1, -2), ad.shape))
        if b.node_id is not None:
            _accum(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ gout, bd.shape))

    return _make(data, g, bw, "matmul")


# ------------------------------------------------------------- shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    data = a.data.reshape(shape)
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "reshape")

    def bw(gout):
        _accum(a, gout.reshape(orig))

    return _make(data, g, bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "transpose")
    inv = tuple(np.argsort(axes))

    def bw(gout):
        _accum(a, gout.transpose(inv))

    return _make(data, g, bw, "transpose")


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "expand")

    def bw(gout):
        _accum(a, _unbroadcast(gout, a.data.shape))

    return _make(data, g, bw, "expand")


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    g = _graph_of(*tensors)
    if g is None:
        return _make(data, None, None, "concat")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(gout):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * gout.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(t, gout[tuple(idx)])

    return _make(data, g, bw, "concat")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0. ``idx`` may have any shape; result is
    idx.shape + a.shape[1:], and duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.take(a.data, idx, axis=0)
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "take_rows")
    ashape = a.data.shape

    def bw(gout):
        ga = np.zeros(ashape, dtype=np.float64)
        np.add.at(ga, idx, gout)
        _accum(a, ga)

    return _make(data, g, bw, "take_rows")


def take_rows_batched(a: Tensor, idx) -> Tensor:
    """Per-batch gather: a is (B, L, ...), idx is (B, r); out[b] = a[b, idx[b]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim < 2 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeMismatch(f"batched gather needs (B, L, ...) and (B, r), got {a.data.shape} and {idx.shape}")
    b_ix = np.arange(idx.shape[0])[:, None]
    data = a.data[b_ix, idx]
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "take_rows_batched")
    ashape = a.data.shape

    def bw(gout):
        ga = np.zeros(ashape, dtype=np.float64)
        np.add.at(ga, (b_ix, idx), gout)
        _accum(a, ga)

    return _make(data, g, bw, "take_rows_batched")


def slice_tokens(a: Tensor, start: int, stop: int) -> Tensor:
    """Basic slice along axis -2 (the token axis)."""
    data = a.data[..., start:stop, :]
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "slice_tokens")
    ashape = a.data.shape

    def bw(gout):
        ga = np.zeros(ashape, dtype=np.float64)
        ga[..., start:stop, :] = gout
        _accum(a, ga)

    return _make(data, g, bw, "slice_tokens")


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())
    g = _graph_of(a)
    if g is None:
        return _make(data, None, None, "sum")
    ashape = a.data.shape

    def bw(gout):
        _accum(a, np.broadcast_to(gout, ashape).copy())

    return _make(data, g, bw, "sum")


# ------------------------------------------------------------ fused NN kernels


def softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)
    g = _graph_of(x)
    if g is None:
        return _make(y, None, None, "softmax")

    def bw(gout):
        dot = (gout * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (gout - dot))

    return _make(y, g, bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    s = np.exp(xd - m).sum(axis=-1, keepdims=True)
    y = xd - m - np.log(s)
    g = _graph_of(x)
    if g is None:
        return _make(y, None, None, "log_softmax")

    def bw(gout):
        p = np.exp(y)
        _accum(x, gout - p * gout.sum(axis=-1, keepdims=True))

    return _make(y, g, bw, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then affine."""
    xd = x.data
    if gamma.data.shape != (xd.shape[-1],) or beta.data.shape != (xd.shape[-1],):
        raise ShapeMismatch("layernorm affine params must match last dim")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    if checked_mode() and np.any(var < eps):
        raise DegenerateRow("layernorm row variance below eps")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    g = _graph_of(x, gamma, beta)
    if g is None:
        return _make(y, None, None, "layernorm")
    gdat = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def bw(gout):
        if beta.node_id is not None:
            _accum(beta, gout.sum(axis=lead))
        if gamma.node_id is not None:
            _accum(gamma, (gout * xhat).sum(axis=lead))
        if x.node_id is not None:
            dxhat = gout * gdat
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(y, g, bw, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """Exact erf form, not the tanh approximation."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = xd * phi
    g = _graph_of(x)
    if g is None:
        return _make(y, None, None, "gelu")

    def bw(gout):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        _accum(x, gout * (phi + xd * pdf))

    return _make(y, g, bw, "gelu")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels.

    logits: (..., C); labels: int or int array matching the leading dims.
    Stable log-sum-exp; reduction is "mean" or "sum" over all rows.
    """
    xd = logits.data
    if xd.ndim < 1:
        raise ShapeMismatch("logits must have a class dim")
    C = xd.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != xd.shape[:-1]:
        raise ShapeMismatch(f"labels shape {lab.shape} does not match logits {xd.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= C):
        raise LabelOutOfRange(f"label outside [0, {C})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = xd.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(xd, lab[..., None], axis=-1)[..., 0]
    per_row = lse - picked
    nrows = max(per_row.size, 1)
    total = per_row.sum()
    data = np.asarray(total / nrows if reduction == "mean" else total)
    g = _graph_of(logits)
    if g is None:
        return _make(data, None, None, "cross_entropy")
    w = 1.0 / nrows if reduction == "mean" else 1.0

    def bw(gout):
        p = np.exp(xd - m)
        p /= p.sum(axis=-1, keepdims=True)
        np.subtract.at(p, (*np.indices(lab.shape), lab) if lab.ndim else (lab,), 1.0)
        _accum(logits, (float(gout) * w) * p)

    return _make(data, g, bw, "cross_entropy")


def per_row_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Plain numpy per-row CE values (diagnostics, no graph)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(logits, np.asarray(labels)[..., None], axis=-1)[..., 0]
    return lse - picked


_TV_SHIFTS = (
    # (row offset, col offset) of the second pixel of each neighbor pair
    (1, 0),   # vertical
    (0, 1),   # horizontal
    (1, 1),   # diagonal
    (1, -1),  # anti-diagonal
)


def _tv_pair_views(arr: np.ndarray, dr: int, dc: int):
    """Views of (a, b) pixel pairs offset by (dr, dc); arr is (..., H, W, C)."""
    rs_a = slice(dr, None) if dr else slice(None)
    rs_b = slice(None, -dr) if dr else slice(None)
    if dc > 0:
        cs_a, cs_b = slice(dc, None), slice(None, -dc)
    elif dc < 0:
        cs_a, cs_b = slice(None, dc), slice(-dc, None)
    else:
        cs_a = cs_b = slice(None)
    return (rs_a, cs_a), (rs_b, cs_b)


def masked_tv(x: Tensor, pixel_mask: np.ndarray) -> Tensor:
    """Total variation over channel vectors, restricted to pixel pairs where
    both endpoints are unmasked. Four neighbor directions (vertical,
    horizontal, both diagonals); each pair counted once. x is (..., H, W, C),
    pixel_mask is bool (..., H, W) broadcastable to x's leading dims.
    """
    xd = x.data
    if xd.ndim < 3:
        raise ShapeMismatch("tv input must be (..., H, W, C)")
    mask = np.broadcast_to(np.asarray(pixel_mask, dtype=bool), xd.shape[:-1])
    total = 0.0
    cache = []
    for dr, dc in _TV_SHIFTS:
        (ra, ca), (rb, cb) = _tv_pair_views(xd, dr, dc)
        a = xd[..., ra, ca, :]
        b = xd[..., rb, cb, :]
        pm = mask[..., ra, ca] & mask[..., rb, cb]
        d = a - b
        n = np.sqrt((d * d).sum(axis=-1))
        total += float(n[pm].sum())
        cache.append((d, n, pm))
    data = np.asarray(total)
    g = _graph_of(x)
    if g is None:
        return _make(data, None, None, "masked_tv")
    xshape = xd.shape

    def bw(gout):
        gx = np.zeros(xshape, dtype=np.float64)
        s = float(gout)
        for (dr, dc), (d, n, pm) in zip(_TV_SHIFTS, cache):
            denom = np.where(n > 0.0, n, 1.0)
            w = (s * pm / denom)[..., None] * d
            (ra, ca), (rb, cb) = _tv_pair_views(gx, dr, dc)
            gx[..., ra, ca, :] += w
            gx[..., rb, cb, :] -= w
        _accum(x, gx)

    return _make(data, g, bw, "masked_tv")


# ----------------------------------------------------------------- optimizers


class AdamState:
    """First/second moment buffers keyed by parameter position."""

    def __init__(self):
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        d = p.data if isinstance(p, Tensor) else p
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(d)
            state.v[i] = np.zeros_like(d)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        d -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_step(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        if g is None:
            continue
        d = p.data if isinstance(p, Tensor) else p
        d -= lr * g
