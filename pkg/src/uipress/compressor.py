"""Optical compressor: N visual tokens -> K tokens.

Pipeline: grid reshape, two stride-2 depthwise-separable blocks, element-guided
reweighting on the downsampled grid, adaptive average pooling to a fixed
budget, and one pre-norm Transformer refinement layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import attention, param, uniform_init
from .tensor import Array, conv_out_size

CATEGORIES = ("text", "button", "icon", "input", "background")
DEFAULT_WEIGHTS = {"text": 1.0, "button": 1.0, "icon": 0.5, "input": 0.5, "background": 0.2}


class ConfigError(ValueError):
    pass


def pool_grid_for(K: int) -> tuple[int, int]:
    side = math.isqrt(K)
    if K < 1 or side * side != K:
        raise ConfigError(f"K must be a perfect square (got {K})")
    return side, side


@dataclass
class CompressorConfig:
    D: int
    K: int = 256
    conv_blocks: int = 2
    groups: int = 32
    heads: int = 8
    ffn_ratio: int = 2
    dropout: float = 0.1
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    # explicit rectangular pool grid; only used for non-square budgets
    pool_grid: tuple[int, int] | None = None
    refine: bool = True
    std_conv: bool = False

    def __post_init__(self):
        if self.pool_grid is not None:
            self.pool_grid = tuple(int(v) for v in self.pool_grid)
            if self.pool_grid[0] * self.pool_grid[1] != self.K:
                raise ConfigError(f"pool grid {self.pool_grid} does not hold K={self.K} tokens")
        else:
            pool_grid_for(self.K)
        if self.D % self.groups:
            raise ConfigError(f"D={self.D} not divisible by groups={self.groups}")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} not divisible by heads={self.heads}")
        missing = set(CATEGORIES) - set(self.weights)
        if missing:
            raise ConfigError(f"weight table missing categories {sorted(missing)}")
        if any(not 0.0 <= float(w) <= 1.0 for w in self.weights.values()):
            raise ConfigError("category weights must lie in [0, 1]")

    @property
    def grid(self) -> tuple[int, int]:
        return self.pool_grid if self.pool_grid is not None else pool_grid_for(self.K)

    def post_conv_dims(self, grid_h: int, grid_w: int) -> tuple[int, int]:
        for _ in range(self.conv_blocks):
            grid_h, grid_w = conv_out_size(grid_h), conv_out_size(grid_w)
        return grid_h, grid_w


@dataclass
class ElementAnnotation:
    boxes: list  # (x0, y0, x1, y1) in page pixels
    categories: list

    def __post_init__(self):
        if len(self.boxes) != len(self.categories):
            raise ValueError("boxes and categories differ in length")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"invalid category {c!r}")
        for b in self.boxes:
            x0, y0, x1, y1 = b
            if not (0 <= x0 < x1 and 0 <= y0 < y1):
                raise ValueError(f"degenerate box {b}")

    def validate_within(self, height_px: int, width_px: int) -> None:
        for x0, y0, x1, y1 in self.boxes:
            if x1 > width_px or y1 > height_px:
                raise ValueError(f"box {(x0, y0, x1, y1)} exceeds page {width_px}x{height_px}")


@dataclass
class SpatialMask:
    weights: Array  # (1, h, w)


def build_element_mask(
    ann: ElementAnnotation,
    img_dims: tuple[int, int],
    grid_dims: tuple[int, int],
    weights: dict | None = None,
) -> SpatialMask:
    """Per-cell max of covering-box category weights; uncovered cells get the background weight.

    A cell is covered when its centre, mapped back to page pixels, lies in
    the half-open box [x0, x1) x [y0, y1).
    """
    weights = weights or DEFAULT_WEIGHTS
    height_px, width_px = img_dims
    h, w = grid_dims
    if h < 1 or w < 1:
        raise ValueError(f"empty mask grid {grid_dims}")
    for c in ann.categories:
        if c not in weights:
            raise ValueError(f"invalid category {c!r}")
    ys = (np.arange(h) + 0.5) * height_px / h
    xs = (np.arange(w) + 0.5) * width_px / w
    best = np.full((h, w), -np.inf)
    for (x0, y0, x1, y1), cat in zip(ann.boxes, ann.categories):
        inside = ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]
        best = np.where(inside, np.maximum(best, weights[cat]), best)
    m = np.where(np.isneginf(best), weights["background"], best)
    return SpatialMask(Array(m[None]))


def tokens_to_grid(tokens: Array, grid_h: int, grid_w: int) -> Array:
    """(..., N, D) row-major tokens -> (..., D, H', W') channel-major map."""
    *lead, N, D = tokens.shape
    if N != grid_h * grid_w:
        raise ValueError(f"{N} tokens cannot fill a {grid_h}x{grid_w} grid")
    n = len(lead)
    x = tokens.reshape(tuple(lead) + (grid_h, grid_w, D))
    return x.transpose(tuple(range(n)) + (n + 2, n, n + 1))


def grid_to_tokens(f: Array) -> Array:
    *lead, D, h, w = f.shape
    n = len(lead)
    x = f.transpose(tuple(range(n)) + (n + 1, n + 2, n))
    return x.reshape(tuple(lead) + (h * w, D))


def dsconv_block(f: Array, dw_kernel: Array, pw_kernel: Array, gamma: Array, beta: Array, groups: int) -> Array:
    return T.gelu(T.group_norm(T.conv2d_pointwise(T.conv2d_depthwise(f, dw_kernel), pw_kernel), groups, gamma, beta))


def std_conv_block(f: Array, kernel: Array, gamma: Array, beta: Array, groups: int) -> Array:
    return T.gelu(T.group_norm(T.conv2d_full(f, kernel), groups, gamma, beta))


def reweight(f: Array, mask: SpatialMask | Array | np.ndarray) -> Array:
    m = mask.weights if isinstance(mask, SpatialMask) else mask
    m = m if isinstance(m, Array) else Array(m)
    if f.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"mask {m.shape[-2:]} does not match feature map {f.shape[-2:]}")
    return T.mul(f, m)


def pool_and_flatten(f: Array, K: int, grid: tuple[int, int] | None = None) -> Array:
    gh, gw = grid if grid is not None else pool_grid_for(K)
    if gh * gw != K:
        raise ConfigError(f"pool grid {gh}x{gw} does not hold K={K} tokens")
    h, w = f.shape[-2:]
    if gh > h or gw > w:
        raise ValueError(f"pool grid {gh}x{gw} larger than feature map {h}x{w}")
    return grid_to_tokens(T.adaptive_avg_pool2d(f, gh, gw))


def refine(z: Array, pos: Array, p: dict, heads: int, dropout: float = 0.0, rng=None) -> Array:
    """One pre-norm Transformer layer applied to ``z + pos``."""
    h = z + pos
    a = T.layer_norm(h, p["ln1.gamma"], p["ln1.beta"])
    mixed = attention(T.linear(a, p["wq"]), T.linear(a, p["wk"]), T.linear(a, p["wv"]), heads, causal=False)
    h = h + T.dropout(T.linear(mixed, p["wo"]), dropout, rng)
    f = T.layer_norm(h, p["ln2.gamma"], p["ln2.beta"])
    f = T.linear(T.gelu(T.linear(f, p["w1"])), p["w2"])
    return h + T.dropout(f, dropout, rng)


class Compressor:
    """Trainable parameters plus forward pass of the optical compressor."""

    def __init__(self, cfg: CompressorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D = cfg.D
        ps: dict[str, Array] = {}
        for b in range(cfg.conv_blocks):
            if cfg.std_conv:
                ps[f"block{b}.conv"] = param(uniform_init(rng, (D, D, 3, 3), 9 * D))
            else:
                ps[f"block{b}.dw"] = param(uniform_init(rng, (D, 3, 3), 9))
                ps[f"block{b}.pw"] = param(uniform_init(rng, (D, D), D))
            ps[f"block{b}.gn.gamma"] = param(np.ones(D))
            ps[f"block{b}.gn.beta"] = param(np.zeros(D))
        if cfg.refine:
            F = cfg.ffn_ratio * D
            ps["pos"] = param(rng.normal(0.0, 0.02, size=(cfg.K, D)))
            ps["refine.ln1.gamma"] = param(np.ones(D))
            ps["refine.ln1.beta"] = param(np.zeros(D))
            for name in ("wq", "wk", "wv", "wo"):
                ps[f"refine.{name}"] = param(uniform_init(rng, (D, D), D))
            ps["refine.ln2.gamma"] = param(np.ones(D))
            ps["refine.ln2.beta"] = param(np.zeros(D))
            ps["refine.w1"] = param(uniform_init(rng, (F, D), D))
            ps["refine.w2"] = param(uniform_init(rng, (D, F), F))
        for name, a in ps.items():
            a.name = name
        self.params = ps

    def parameters(self) -> list[Array]:
        return list(self.params.values())

    def to(self, dtype) -> "Compressor":
        T.cast_(self.params.values(), dtype)
        return self

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def mask_grid(self, grid_h: int, grid_w: int) -> tuple[int, int]:
        return self.cfg.post_conv_dims(grid_h, grid_w)

    def check_input(self, grid_h: int, grid_w: int) -> None:
        h, w = self.mask_grid(grid_h, grid_w)
        gh, gw = self.cfg.grid
        if gh > h or gw > w:
            raise ValueError(
                f"a {grid_h}x{grid_w} token grid downsamples to {h}x{w}, "
                f"too small for the {gh}x{gw} pool grid of K={self.cfg.K}"
            )

    def forward(self, tokens: Array, grid_h: int, grid_w: int, mask, train: bool = False, rng=None) -> Array:
        """tokens (..., N, D) and mask (..., 1, h, w) on the post-conv grid -> (..., K, D)."""
        cfg, p = self.cfg, self.params
        self.check_input(grid_h, grid_w)
        f = tokens_to_grid(tokens, grid_h, grid_w)
        for b in range(cfg.conv_blocks):
            if cfg.std_conv:
                f = std_conv_block(f, p[f"block{b}.conv"], p[f"block{b}.gn.gamma"], p[f"block{b}.gn.beta"], cfg.groups)
            else:
                f = dsconv_block(
                    f, p[f"block{b}.dw"], p[f"block{b}.pw"], p[f"block{b}.gn.gamma"], p[f"block{b}.gn.beta"], cfg.groups
                )
        f = reweight(f, mask)
        z = pool_and_flatten(f, cfg.K, cfg.grid)
        if not cfg.refine:
            return z
        sub = {k[len("refine.") :]: v for k, v in p.items() if k.startswith("refine.")}
        drop = cfg.dropout if train else 0.0
        return refine(z, p["pos"], sub, cfg.heads, drop, rng)


def compress(v, ann: ElementAnnotation, img_dims, cfg: CompressorConfig, comp: Compressor, train=False, rng=None) -> Array:
    """Single-sample convenience wrapper: VisualTokens + annotation -> (K, D)."""
    comp.check_input(v.grid_h, v.grid_w)
    mask = build_element_mask(ann, img_dims, comp.mask_grid(v.grid_h, v.grid_w), cfg.weights)
    return comp.forward(v.tokens, v.grid_h, v.grid_w, mask, train=train, rng=rng)


def count_compressor_params(cfg: CompressorConfig) -> int:
    """Closed-form count of trainable scalars for a configuration."""
    D = cfg.D
    if cfg.std_conv:
        block = 9 * D * D + 2 * D
    else:
        block = 9 * D + D * D + 2 * D
    total = cfg.conv_blocks * block
    if cfg.refine:
        total += cfg.K * D + 4 * D * D + 2 * cfg.ffn_ratio * D * D + 4 * D
    return total


def conv_param_count(cfg: CompressorConfig) -> int:
    """Convolution weights only (excluding norm affine), for the std-conv comparison."""
    D = cfg.D
    per = 9 * D * D if cfg.std_conv else 9 * D + D * D
    return cfg.conv_blocks * per
