"""Analytic prefill cost model plus an instrumented count on the toy decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

# Token count of an uncompressed 1920x1080 page at the reference encoder's patching.
REFERENCE_N = 6517


@dataclass(frozen=True)
class PrefillSpec:
    visual_tokens: int
    prompt_len: int
    D: int
    layers: int
    ffn_width: int | None = None  # defaults to 4D

    def __post_init__(self):
        for name in ("visual_tokens", "prompt_len", "D", "layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ffn_width is not None and self.ffn_width <= 0:
            raise ValueError("ffn_width must be positive")

    @property
    def seq_len(self) -> int:
        return self.visual_tokens + self.prompt_len

    @property
    def ffn(self) -> int:
        return 4 * self.D if self.ffn_width is None else self.ffn_width


@dataclass(frozen=True)
class LayerFlops:
    projections: int
    attention: int
    ffn: int

    @property
    def total(self) -> int:
        return self.projections + self.attention + self.ffn


@dataclass(frozen=True)
class FlopsReport:
    spec: PrefillSpec
    layer: LayerFlops

    @property
    def per_layer(self) -> int:
        return self.layer.total

    @property
    def total(self) -> int:
        return self.spec.layers * self.layer.total


def flops_layer(spec: PrefillSpec) -> LayerFlops:
    """4 S D^2 + 2 S^2 D + 16 S D^2 with S = K + P; the FFN term scales with ffn_width / 4D."""
    S, D = spec.seq_len, spec.D
    return LayerFlops(
        projections=4 * S * D * D,
        attention=2 * S * S * D,
        ffn=4 * S * D * spec.ffn,
    )


def flops_prefill(spec: PrefillSpec) -> FlopsReport:
    return FlopsReport(spec, flops_layer(spec))


def speedup(spec_n: PrefillSpec, spec_k: PrefillSpec) -> tuple[float, float]:
    """(exact prefill FLOPs ratio, attention-only approximation N^2 / K^2)."""
    if (spec_n.D, spec_n.layers, spec_n.prompt_len, spec_n.ffn) != (spec_k.D, spec_k.layers, spec_k.prompt_len, spec_k.ffn):
        raise ValueError("speedup compares specs that differ only in visual token count")
    exact = flops_prefill(spec_n).total / flops_prefill(spec_k).total
    approx = spec_n.visual_tokens**2 / spec_k.visual_tokens**2
    return exact, approx


def compression_ratio(n: int, k: int) -> float:
    if n <= 0 or k <= 0:
        raise ValueError("token counts must be positive")
    return n / k


def format_ratio(r: float) -> str:
    """Large ratios as integers ("102x"), smaller ones with one decimal ("25.5x")."""
    return f"{r:.0f}x" if r >= 50 else f"{r:.1f}x"


# -- instrumented counts -----------------------------------------------------------


@dataclass(frozen=True)
class MacModel:
    """Multiply-accumulates of one decoder layer, each matmul counted once."""

    projections: int
    attention: int
    ffn: int

    @property
    def total(self) -> int:
        return self.projections + self.attention + self.ffn


def mac_model_layer(spec: PrefillSpec) -> MacModel:
    S, D = spec.seq_len, spec.D
    return MacModel(projections=4 * S * D * D, attention=2 * S * S * D, ffn=2 * S * D * spec.ffn)


def instrumented_macs(decoder, seq_len: int, batch: int = 1, seed: int = 0) -> dict[str, int]:
    """MACs per tag during one no-grad prefill of random embeddings of length ``seq_len``.

    Tags: proj (q/k/v/o), attention (scores and mixing), ffn, lora, head.
    Per-layer figures follow by dividing proj/attention/ffn by the layer count.
    """
    x = T.Array(np.random.default_rng(seed).normal(size=(batch, seq_len, decoder.cfg.D)))
    with T.no_grad(), T.count_macs() as counter:
        decoder.forward_embeddings(x)
    return dict(counter.counts)


def instrumented_flops(decoder, seq_len: int) -> int:
    """2 x MACs of the projection, attention and FFN matmuls over all layers."""
    m = instrumented_macs(decoder, seq_len)
    return 2 * (m.get("proj", 0) + m.get("attention", 0) + m.get("ffn", 0))


def compressor_overhead(compressor, grid_h: int, grid_w: int, decoder_spec: PrefillSpec) -> dict[str, float]:
    """Compressor matmul MACs on one image against the decoder's analytic prefill cost."""
    gh, gw = grid_h, grid_w
    D = compressor.cfg.D
    x = T.Array(np.zeros((gh * gw, D)))
    mask = np.ones((1,) + compressor.mask_grid(gh, gw))
    with T.no_grad(), T.count_macs() as counter:
        compressor.forward(x, gh, gw, mask)
    conv_macs = _conv_macs(compressor, gh, gw)
    macs = counter.total + conv_macs
    prefill = flops_prefill(decoder_spec).total
    return {"compressor_flops": 2.0 * macs, "prefill_flops": float(prefill), "ratio": 2.0 * macs / prefill}


def _conv_macs(compressor, gh: int, gw: int) -> int:
    """Depthwise / standard conv MACs, which do not pass through the matmul counter."""
    cfg = compressor.cfg
    D = cfg.D
    h, w = gh, gw
    total = 0
    for _ in range(cfg.conv_blocks):
        h, w = T.conv_out_size(h), T.conv_out_size(w)
        total += h * w * D * 9 * (D if cfg.std_conv else 1)
    return total
