"""Frozen patch encoder standing in for the vision transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Array


@dataclass
class PageImage:
    """An RGB page with values in [0, 1], stored as (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"page image must be (H, W, 3), got {self.pixels.shape}")

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]


@dataclass
class VisualTokens:
    tokens: Array  # (N, D) or (B, N, D)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ValueError(
                f"token count {self.tokens.shape[-2]} != grid {self.grid_h}x{self.grid_w}"
            )

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class FrozenEncoder:
    patch_size: int
    proj: Array  # (3 p^2, D)
    pos: Array  # (max_h, max_w, D)

    @property
    def dim(self) -> int:
        return self.proj.shape[1]

    def to(self, dtype) -> "FrozenEncoder":
        self.proj.data = self.proj.data.astype(dtype)
        self.pos.data = self.pos.data.astype(dtype)
        return self

    @property
    def max_grid(self) -> tuple[int, int]:
        return self.pos.shape[0], self.pos.shape[1]


def init_frozen_encoder(seed: int, patch_size: int, D: int, max_grid: tuple[int, int]) -> FrozenEncoder:
    rng = np.random.default_rng(seed)
    fan_in = 3 * patch_size * patch_size
    proj = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, D))
    pos = rng.normal(0.0, 0.5, size=(max_grid[0], max_grid[1], D))
    return FrozenEncoder(patch_size, Array(proj), Array(pos))


def _patchify(pixels: np.ndarray, p: int) -> tuple[np.ndarray, int, int]:
    *lead, H, W, C = pixels.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = pixels.reshape(tuple(lead) + (gh, p, gw, p, C))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return x.reshape(tuple(lead) + (gh * gw, p * p * C)), gh, gw


def encode_pixels(pixels: np.ndarray, enc: FrozenEncoder) -> VisualTokens:
    """Batched form of :func:`patch_encode` over (..., H, W, 3) pixel arrays."""
    patches, gh, gw = _patchify(np.asarray(pixels, dtype=enc.proj.data.dtype), enc.patch_size)
    mh, mw = enc.max_grid
    if gh > mh or gw > mw:
        raise ValueError(f"grid {gh}x{gw} exceeds encoder max grid {mh}x{mw}")
    pos = enc.pos.data[:gh, :gw].reshape(gh * gw, enc.dim)
    tokens = patches @ enc.proj.data + pos
    return VisualTokens(Array(tokens), gh, gw)


def patch_encode(img: PageImage, enc: FrozenEncoder) -> VisualTokens:
    return encode_pixels(img.pixels, enc)


def resolution_scale(img: PageImage, factor: int) -> PageImage:
    """Average-pool each factor x factor pixel block."""
    H, W = img.height_px, img.width_px
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"factor {factor} does not divide image {H}x{W}")
    if factor == 1:
        return PageImage(img.pixels.copy())
    blocks = img.pixels.reshape(H // factor, factor, W // factor, factor, 3)
    return PageImage(blocks.mean(axis=(1, 3)))
