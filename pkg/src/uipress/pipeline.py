"""End-to-end model: frozen encoder -> token path -> decoder with LoRA.

The token path is what differs between methods; everything else (encoder,
frozen decoder base, prompt, generation settings) is shared.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .baselines import topk_norm_indices, zero_lowest_norm
from .compressor import Compressor, CompressorConfig, build_element_mask
from .decoder import Decoder, DecoderConfig, generate
from .encoder import FrozenEncoder, encode_pixels, init_frozen_encoder
from .synth import EOS_ID, PROMPT_IDS, VOCAB, SyntheticSample, parse_lenient, render, similarity
from .tensor import Array
from .training import Batch, autoregressive_loss, make_batch

METHODS = ("uipress", "topk_norm", "feature_zero", "resolution", "uncompressed")


@dataclass
class ModelConfig:
    """Toy-scale dimensions shared by encoder, compressor and decoder."""

    height: int = 64
    width: int = 64
    patch_size: int = 4
    D: int = 32
    K: int = 16
    pool_grid: tuple | None = None
    groups: int = 8
    comp_heads: int = 8
    dropout: float = 0.1
    dec_layers: int = 2
    dec_heads: int = 4
    max_seq_len: int = 384
    lora_rank: int = 8
    lora_alpha: float = 16.0
    seed: int = 0
    dtype: str = "float64"

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    def compressor_config(self, **overrides) -> CompressorConfig:
        kw = dict(
            D=self.D,
            K=self.K,
            groups=self.groups,
            heads=self.comp_heads,
            dropout=self.dropout,
            pool_grid=self.pool_grid,
        )
        kw.update(overrides)
        return CompressorConfig(**kw)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=len(VOCAB),
            D=self.D,
            layers=self.dec_layers,
            heads=self.dec_heads,
            max_seq_len=self.max_seq_len,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class UIPressModel:
    """Encoder + token path + decoder, with one method selecting the token path."""

    def __init__(
        self,
        cfg: ModelConfig,
        encoder: FrozenEncoder,
        decoder: Decoder,
        method: str = "uipress",
        method_param=None,
        compressor: Compressor | None = None,
        lora_trainable: bool = True,
    ):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = decoder
        self.method = method
        self.method_param = method_param
        if method == "uipress" and compressor is None:
            raise ValueError("uipress method needs a compressor")
        if compressor is not None:
            compressor.to(decoder.dtype)
        self.compressor = compressor if method == "uipress" else None
        self.decoder.set_lora_trainable(lora_trainable)
        self.lora_trainable = lora_trainable
        if method == "topk_norm" and method_param is None:
            raise ValueError("topk_norm needs K")
        if method == "feature_zero" and method_param is None:
            raise ValueError("feature_zero needs a zero fraction")
        if method == "resolution" and method_param is None:
            raise ValueError("resolution needs a scale factor")

    # -- bookkeeping ----------------------------------------------------------

    def param_groups(self) -> dict[str, list[Array]]:
        groups = {"compressor": [], "lora": []}
        if self.compressor is not None:
            groups["compressor"] = self.compressor.parameters()
        if self.lora_trainable:
            groups["lora"] = self.decoder.lora_parameters()
        return groups

    def named_groups(self) -> dict[str, dict[str, Array]]:
        groups = {"compressor": {}, "lora": {}}
        if self.compressor is not None:
            groups["compressor"] = {f"compressor.{k}": v for k, v in self.compressor.params.items()}
        if self.lora_trainable:
            groups["lora"] = {f"lora.{k}": v for k, v in self.decoder.lora_named().items()}
        return groups

    def trainable_parameters(self) -> list[Array]:
        g = self.param_groups()
        return g["compressor"] + g["lora"]

    def trainable_snapshot(self) -> dict[str, np.ndarray]:
        return {k: a.data.copy() for ps in self.named_groups().values() for k, a in ps.items()}

    def load_trainable(self, snap: dict[str, np.ndarray]) -> None:
        for ps in self.named_groups().values():
            for k, a in ps.items():
                a.data = snap[k].copy()

    def frozen_parameters(self) -> list[Array]:
        out = [self.encoder.proj, self.encoder.pos] + self.decoder.base_parameters()
        if not self.lora_trainable:
            out += self.decoder.lora_parameters()
        return out

    def named_state(self) -> dict[str, Array]:
        state = {"encoder.proj": self.encoder.proj, "encoder.pos": self.encoder.pos}
        state.update({f"decoder.{k}": v for k, v in self.decoder.base.items()})
        state.update({f"lora.{k}": v for k, v in self.decoder.lora_named().items()})
        if self.compressor is not None:
            state.update({f"compressor.{k}": v for k, v in self.compressor.params.items()})
        return state

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_state().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        state = self.named_state()
        for k, v in state.items():
            if k not in snap:
                raise KeyError(f"checkpoint lacks {k}")
            if snap[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {snap[k].shape} vs {v.shape}")
            v.data = np.array(snap[k], dtype=v.data.dtype)

    def n_visual_tokens(self) -> int:
        gh, gw = self.cfg.grid
        if self.method == "uipress":
            return self.compressor.cfg.K
        if self.method == "topk_norm":
            return int(self.method_param)
        if self.method == "resolution":
            f = int(self.method_param)
            return (gh // f) * (gw // f)
        return gh * gw

    # -- forward --------------------------------------------------------------

    def masks(self, samples) -> np.ndarray:
        gh, gw = self.cfg.grid
        mh, mw = self.compressor.mask_grid(gh, gw)
        w = self.compressor.cfg.weights
        dims = (self.cfg.height, self.cfg.width)
        masks = [build_element_mask(s.annotation, dims, (mh, mw), w).weights.data for s in samples]
        return np.stack(masks).astype(self.decoder.dtype)

    def visual(self, batch: Batch, train: bool = False, rng=None) -> Array:
        """(B, n_visual, D) decoder prefix for ``batch`` under this model's method."""
        pixels = batch.pixels
        if self.method == "resolution":
            f = int(self.method_param)
            B, H, W, C = pixels.shape
            if H % f or W % f:
                raise ValueError(f"factor {f} does not divide {H}x{W}")
            pixels = pixels.reshape(B, H // f, f, W // f, f, C).mean(axis=(2, 4))
        vt = encode_pixels(pixels, self.encoder)
        tokens = vt.tokens
        if self.method == "uipress":
            return self.compressor.forward(tokens, vt.grid_h, vt.grid_w, self.masks(batch.samples), train=train, rng=rng)
        if self.method == "topk_norm":
            K = int(self.method_param)
            return Array(np.stack([row[topk_norm_indices(row, K)] for row in tokens.data]))
        if self.method == "feature_zero":
            return Array(np.stack([zero_lowest_norm(row, float(self.method_param)) for row in tokens.data]))
        return tokens

    def loss(self, batch: Batch, train: bool = False, rng=None) -> Array:
        vis = self.visual(batch, train=train, rng=rng)
        logits = self.decoder.forward(vis, PROMPT_IDS, batch.targets)
        return autoregressive_loss(logits, batch.loss_targets, len(PROMPT_IDS), vis.shape[-2])

    def prefill(self, batch: Batch) -> Array:
        with T.no_grad():
            vis = self.visual(batch)
            return self.decoder.forward(vis, PROMPT_IDS, None)

    def generate(self, samples: list[SyntheticSample], max_new: int = 96) -> list[list[int]]:
        with T.no_grad():
            vis = self.visual(make_batch(samples))
            return generate(self.decoder, vis, PROMPT_IDS, max_new, eos_id=EOS_ID)

    def score(self, samples: list[SyntheticSample], max_new: int = 96, batch_size: int = 32) -> list[float]:
        """Render-back similarity of the generated markup against each sample's image."""
        scores = []
        dims = (self.cfg.height, self.cfg.width)
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            for s, ids in zip(chunk, self.generate(chunk, max_new)):
                prog, _ = parse_lenient(ids)
                scores.append(similarity(render(prog, dims), s.image))
        return scores


def build_base(cfg: ModelConfig) -> tuple[FrozenEncoder, Decoder]:
    """Fresh (untrained) frozen encoder and decoder for a model configuration."""
    enc = init_frozen_encoder(cfg.seed, cfg.patch_size, cfg.D, cfg.grid).to(cfg.dtype)
    dec = Decoder(cfg.decoder_config(), seed=cfg.seed + 1).to(cfg.dtype)
    return enc, dec
