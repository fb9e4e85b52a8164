"""Dense arrays with a reverse-mode tape.

Every differentiable op records one node on the module-level tape when any of
its inputs requires a gradient.  ``backward`` replays the tape in reverse
creation order (a valid topological order) and then clears it.

Ops accept optional leading batch axes where that is cheap to support, so a
training step can process a whole micro-batch in one graph.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from collections import defaultdict
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: "Array", parents: tuple, backward_fn: Callable) -> None:
        node = _Node(out, parents, backward_fn)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


TAPE = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable recording; outputs never require grad inside the block."""
    prev = TAPE.enabled
    TAPE.enabled = False
    try:
        yield
    finally:
        TAPE.enabled = prev


class MacCounter:
    """Tallies multiply-accumulates of every matmul, keyed by the active tag."""

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self.tag = "other"

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def mac_tag(tag: str):
    """Attribute matmuls inside the block to ``tag`` on all active counters."""
    prev = [c.tag for c in _COUNTERS]
    for c in _COUNTERS:
        c.tag = tag
    try:
        yield
    finally:
        for c, t in zip(_COUNTERS, prev):
            c.tag = t


def _add_macs(n: int) -> None:
    for c in _COUNTERS:
        c.counts[c.tag] += int(n)


class Array:
    """A dense real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Array":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._node = None
        out.name = None
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_array(other)))

    def __rsub__(self, other):
        return add(_as_array(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def cast_(arrays, dtype) -> None:
    """Convert arrays (and their grads) to ``dtype`` in place."""
    for a in arrays:
        a.data = a.data.astype(dtype)
        if a.grad is not None:
            a.grad = a.grad.astype(dtype)


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Array:
    track = TAPE.enabled and any(p.requires_grad for p in parents)
    out = Array._wrap(data, track)
    if track:
        TAPE.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# backward


def backward(loss: Array) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf, then clear the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise RuntimeError("backward called without a recorded tape for this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(TAPE.nodes):
        g = grads.pop(id(nd.out), None)
        if g is None:
            continue
        nd.out.grad = g
        parent_grads = nd.backward_fn(g)
        for parent, pg in zip(nd.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.data.dtype:
                pg = pg.astype(parent.data.dtype)
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    TAPE.clear()


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def scale(a: Array, s: float) -> Array:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Array) -> Array:
    return _make(-a.data, (a,), lambda g: (-g,))


def sum_all(a: Array) -> Array:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Array) -> Array:
    shape, n = a.shape, a.size
    return _make(np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(shape, g / n, dtype=a.data.dtype),))


def gelu(x: Array) -> Array:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _SQRT_2_OVER_PI * xd * (1.0 + GELU_COEF * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x2)
        return (g * d,)

    return _make(out, (x,), bw)


def dropout(x: Array, p: float, rng: np.random.Generator | None) -> Array:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def masked_fill(x: Array, mask: np.ndarray, value: float) -> Array:
    """Replace entries where ``mask`` is true by a constant; those receive no gradient."""
    keep = ~mask
    return _make(np.where(mask, value, x.data), (x,), lambda g: (np.where(keep, g, 0.0),))


# --------------------------------------------------------------------------
# shape ops


def reshape(a: Array, shape: Sequence[int]) -> Array:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Array, axes: Sequence[int]) -> Array:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Array, idx) -> Array:
    shape, dtype = a.shape, a.data.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [_as_array(a) for a in arrays]
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([a.data for a in arrays], axis=axis), tuple(arrays), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Array, b: Array) -> Array:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_array(a), _as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    if _COUNTERS:
        _add_macs(out.size * ad.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw)


def linear(x: Array, w: Array) -> Array:
    """``x @ w.T`` for a weight stored as (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: {x.shape} with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if _COUNTERS:
        _add_macs(out.size * wd.shape[1])

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw

    return _make(out, (x, w), bw)


# --------------------------------------------------------------------------
# convolution and pooling


def conv_out_size(n: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _conv_windows(xd: np.ndarray, h2: int, w2: int, stride: int):
    for di in range(3):
        for dj in range(3):
            yield di, dj, (Ellipsis, slice(di, di + stride * (h2 - 1) + 1, stride), slice(dj, dj + stride * (w2 - 1) + 1, stride))


def _pad_hw(xd: np.ndarray, padding: int) -> np.ndarray:
    pad = [(0, 0)] * (xd.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(xd, pad)


def conv2d_depthwise(x: Array, k: Array, stride: int = 2, padding: int = 1) -> Array:
    """Per-channel 3x3 cross-correlation with zero padding; x is (..., C, H, W), k is (C, 3, 3)."""
    if k.ndim != 3 or k.shape[1:] != (3, 3):
        raise ShapeError(f"depthwise kernel must be (C, 3, 3), got {k.shape}")
    if x.ndim < 3 or x.shape[-3] != k.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {k.shape}")
    H, W = x.shape[-2:]
    h2, w2 = conv_out_size(H, 3, stride, padding), conv_out_size(W, 3, stride, padding)
    xp = _pad_hw(x.data, padding)
    kd = k.data
    out = np.zeros(x.shape[:-2] + (h2, w2), dtype=xp.dtype)
    for di, dj, sl in _conv_windows(xp, h2, w2, stride):
        out = out + xp[sl] * kd[:, di, dj, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        lead = tuple(range(g.ndim - 3))
        for di, dj, sl in _conv_windows(xp, h2, w2, stride):
            gk[:, di, dj] = (g * xp[sl]).sum(axis=lead + (-2, -1))
            gxp[sl] += g * kd[:, di, dj, None, None]
        return gxp[..., padding : padding + H, padding : padding + W], gk

    return _make(out, (x, k), bw)


def conv2d_full(x: Array, k: Array, stride: int = 2, padding: int = 1) -> Array:
    """Standard dense 3x3 convolution; x is (..., C_in, H, W), k is (C_out, C_in, 3, 3)."""
    if k.ndim != 4 or k.shape[2:] != (3, 3) or x.shape[-3] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {k.shape}")
    H, W = x.shape[-2:]
    h2, w2 = conv_out_size(H, 3, stride, padding), conv_out_size(W, 3, stride, padding)
    xp = _pad_hw(x.data, padding)
    kd = k.data
    out = np.zeros(x.shape[:-3] + (k.shape[0], h2, w2), dtype=xp.dtype)
    for di, dj, sl in _conv_windows(xp, h2, w2, stride):
        out = out + np.einsum("oc,...chw->...ohw", kd[:, :, di, dj], xp[sl])

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for di, dj, sl in _conv_windows(xp, h2, w2, stride):
            gk[:, :, di, dj] = np.einsum("...ohw,...chw->oc", g, xp[sl])
            gxp[sl] += np.einsum("oc,...ohw->...chw", kd[:, :, di, dj], g)
        return gxp[..., padding : padding + H, padding : padding + W], gk

    return _make(out, (x, k), bw)


def conv2d_pointwise(x: Array, k: Array) -> Array:
    """1x1 convolution: per-pixel linear map across channels; k is (C_out, C_in)."""
    if x.ndim < 3 or k.ndim != 2 or x.shape[-3] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {k.shape}")
    *lead, C, H, W = x.shape
    flat = reshape(x, tuple(lead) + (C, H * W))
    nd = flat.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    mixed = linear(transpose(flat, perm), k)  # (..., HW, C_out)
    back = transpose(mixed, perm)
    return reshape(back, tuple(lead) + (k.shape[0], H, W))


def _pool_bounds(n: int, out: int) -> list[tuple[int, int]]:
    return [((i * n) // out, ((i + 1) * n) // out) for i in range(out)]


def adaptive_avg_pool2d(x: Array, out_h: int, out_w: int) -> Array:
    """Mean over floor-partitioned windows; each window sum is accumulated row-major."""
    H, W = x.shape[-2:]
    if not (1 <= out_h <= H and 1 <= out_w <= W):
        raise ShapeError(f"pool output {out_h}x{out_w} exceeds input {H}x{W}")
    xd = x.data
    rows, cols = _pool_bounds(H, out_h), _pool_bounds(W, out_w)
    out = np.empty(x.shape[:-2] + (out_h, out_w), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            s = np.zeros(x.shape[:-2], dtype=xd.dtype)
            for r in range(r0, r1):
                for c in range(c0, c1):
                    s = s + xd[..., r, c]
            out[..., i, j] = s / ((r1 - r0) * (c1 - c0))

    def bw(g):
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[..., r0:r1, c0:c1] += (g[..., i, j] / ((r1 - r0) * (c1 - c0)))[..., None, None]
        return (gx,)

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# normalization and probability


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def group_norm(x: Array, groups: int, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """GroupNorm over (..., C, H, W) with per-channel affine."""
    *lead, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"channels ({C}) not divisible by groups ({groups})")
    xg = x.data.reshape(tuple(lead) + (groups, C // groups, H, W))
    axes = (-3, -2, -1)
    mu = xg.mean(axis=axes, keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    gd, bd = gamma.data[:, None, None], beta.data[:, None, None]
    out = xhat * gd + bd
    red = tuple(range(len(lead))) + (-2, -1)

    def bw(g):
        g_gamma = (g * xhat).sum(axis=red)
        g_beta = g.sum(axis=red)
        g_hat = (g * gd).reshape(xg.shape)
        gx = _normalize_backward(g_hat, xhat.reshape(xg.shape), inv_std, axes).reshape(x.shape)
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), bw)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """LayerNorm over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        flat_g = g.reshape(-1, g.shape[-1])
        g_gamma = (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0)
        g_beta = flat_g.sum(axis=0)
        gx = _normalize_backward(g * gamma.data, xhat, inv_std, -1)
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), bw)


def softmax(x: Array, axis: int = -1) -> Array:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def scaled_masked_softmax(x: Array, scale: float, mask: np.ndarray | None = None) -> Array:
    """softmax(scale * x) along the last axis with ``mask``-true entries excluded.

    One fused node for the attention inner loop; equals
    softmax(masked_fill(x * scale, mask, -inf)).
    """
    z = x.data * scale
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        gy *= scale
        return (gy,)

    return _make(y, (x,), bw)


def embedding_lookup(table: Array, ids) -> Array:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def cross_entropy_from_logits(logits: Array, targets, ignore_index: int = -100, weights=None) -> Array:
    """Weighted NLL of integer targets; default weights average over non-ignored positions."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= V)):
        raise IndexError(f"target id out of range [0, {V})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross-entropy over zero non-ignored positions")
    if weights is None:
        w = valid / n_valid
    else:
        w = np.where(valid, np.asarray(weights, dtype=logits.data.dtype), 0.0)
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    e = np.exp(ld - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se))[..., 0]
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(ld, safe_t[..., None], axis=-1)[..., 0]
    nll = np.where(valid, lse - picked, 0.0)
    loss = np.asarray((w * nll).sum())

    def bw(g):
        p = e / se
        onehot = np.zeros_like(ld)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w * g)[..., None],)

    return _make(loss, (logits,), bw)


# --------------------------------------------------------------------------
# serialization

_MAGIC = b"UIPT"
_FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_arrays(path, arrays: dict[str, np.ndarray | Array], meta: dict | None = None) -> None:
    """Write named arrays to a versioned container (header first, then LE payloads)."""
    items = [(name, np.asarray(a.data if isinstance(a, Array) else a)) for name, a in arrays.items()]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _FORMAT_VERSION, len(items), len(meta_bytes)))
        f.write(meta_bytes)
        for name, a in items:
            dt = np.dtype(a.dtype).newbyteorder("<")
            if dt not in _DTYPE_CODES:
                dt = np.dtype("<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[dt], a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for name, a in items:
            dt = np.dtype(a.dtype).newbyteorder("<")
            if dt not in _DTYPE_CODES:
                dt = np.dtype("<f8")
            f.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not an array container")
    version, count, meta_len = struct.unpack_from("<III", buf, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 16
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    off += meta_len
    headers = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        headers.append((name, _CODE_DTYPES[code], dims))
    out = {}
    for name, dt, dims in headers:
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf[off : off + n], dtype=dt).reshape(dims).copy()
        off += n
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes after payloads")
    return out, meta

