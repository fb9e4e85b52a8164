"""Parameter init and the attention block shared by the compressor and decoder."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Array


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param(data, name: str | None = None) -> Array:
    return Array(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def frozen(data, name: str | None = None) -> Array:
    return Array(np.asarray(data, dtype=np.float64), requires_grad=False, name=name)


def split_heads(x: Array, heads: int) -> Array:
    *lead, S, D = x.shape
    if D % heads:
        raise ValueError(f"hidden size {D} not divisible by {heads} heads")
    n = len(lead)
    x = x.reshape(tuple(lead) + (S, heads, D // heads))
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Array) -> Array:
    *lead, h, S, dh = x.shape
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(tuple(lead) + (S, h * dh))


def causal_mask(S: int) -> np.ndarray:
    return np.triu(np.ones((S, S), dtype=bool), k=1)


def attention(q: Array, k: Array, v: Array, heads: int, causal: bool) -> Array:
    """Scaled dot-product attention over (..., S, D) inputs split into ``heads``."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    dh = qh.shape[-1]
    nd = kh.ndim
    kt = kh.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))
    with T.mac_tag("attention"):
        scores = T.matmul(qh, kt)
        mask = causal_mask(scores.shape[-1]) if causal else None
        probs = T.scaled_masked_softmax(scores, 1.0 / math.sqrt(dh), mask)
        mixed = T.matmul(probs, vh)
    return merge_heads(mixed)
