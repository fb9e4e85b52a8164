"""Training-free token-path baselines: norm-based selection and feature zeroing."""

from __future__ import annotations

import numpy as np

from .encoder import VisualTokens
from .tensor import Array


def topk_norm_indices(tokens: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest-L2-norm rows, ties to the lower index, returned in original order."""
    N = tokens.shape[0]
    if K > N:
        raise ValueError(f"K={K} exceeds token count N={N}")
    norms = np.linalg.norm(tokens, axis=-1)
    order = np.lexsort((np.arange(N), -norms))
    return np.sort(order[:K])


def baseline_topk_norm(v: VisualTokens, K: int) -> Array:
    data = v.tokens.data
    if data.ndim == 2:
        return Array(data[topk_norm_indices(data, K)])
    return Array(np.stack([row[topk_norm_indices(row, K)] for row in data]))


def zero_lowest_norm(tokens: np.ndarray, fraction: float) -> np.ndarray:
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"zero fraction must be in [0, 1), got {fraction}")
    N = tokens.shape[0]
    n_zero = int(np.floor(fraction * N))
    out = tokens.copy()
    if n_zero:
        norms = np.linalg.norm(tokens, axis=-1)
        order = np.lexsort((np.arange(N), norms))
        out[order[:n_zero]] = 0.0
    return out


def baseline_feature_zero(v: VisualTokens, fraction: float) -> VisualTokens:
    """Zero the floor(fraction * N) lowest-norm tokens; sequence length is unchanged."""
    data = v.tokens.data
    if data.ndim == 2:
        z = zero_lowest_norm(data, fraction)
    else:
        z = np.stack([zero_lowest_norm(row, fraction) for row in data])
    return VisualTokens(Array(z), v.grid_h, v.grid_w)
