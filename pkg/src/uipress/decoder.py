"""Small causal decoder whose query/value projections carry LoRA adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import attention, param, uniform_init
from .tensor import Array


@dataclass
class DecoderConfig:
    vocab_size: int
    D: int = 32
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 384
    ffn_mult: int = 4
    lora_rank: int = 16
    lora_alpha: float = 32.0

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.lora_rank > self.D:
            raise ValueError(f"LoRA rank {self.lora_rank} exceeds D={self.D}")


@dataclass
class LoraLinear:
    """Frozen weight W (out, in) plus trainable factors A (r, in) and B (out, r)."""

    W: Array
    A: Array
    B: Array
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def make_lora(W: np.ndarray, rank: int, alpha: float, rng: np.random.Generator) -> LoraLinear:
    d_out, d_in = W.shape
    if rank > min(d_out, d_in):
        raise ValueError(f"LoRA rank {rank} exceeds projection size {W.shape}")
    A = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, d_in))
    return LoraLinear(Array(W), param(A), param(np.zeros((d_out, rank))), alpha)


def lora_forward(x: Array, m: LoraLinear) -> Array:
    """x W^T + (alpha/r) (x A^T) B^T, never forming the merged weight."""
    if m.rank > m.W.shape[1]:
        raise ValueError(f"LoRA rank {m.rank} exceeds D={m.W.shape[1]}")
    with T.mac_tag("proj"):
        base = T.linear(x, m.W)
    with T.mac_tag("lora"):
        update = T.linear(T.linear(x, m.A), m.B)
    return base + update * m.scale


def merge_lora(m: LoraLinear) -> Array:
    return Array(m.W.data + m.scale * (m.B.data @ m.A.data))


def count_lora_params(L: int, r: int, D: int, projections_per_layer: int = 2) -> int:
    return L * projections_per_layer * 2 * r * D


class Decoder:
    """Decoder-only Transformer over [visual prefix | prompt | targets].

    Base weights are trainable only during text-only pretraining; after
    :meth:`freeze_base` only the LoRA factors can receive gradients.
    """

    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D, V, F = cfg.D, cfg.vocab_size, cfg.ffn_mult * cfg.D
        self.base: dict[str, Array] = {
            "tok_emb": Array(rng.normal(0.0, 0.02, size=(V, D))),
            "pos_emb": Array(rng.normal(0.0, 0.02, size=(cfg.max_seq_len, D))),
            "ln_f.gamma": Array(np.ones(D)),
            "ln_f.beta": Array(np.zeros(D)),
            "head": Array(uniform_init(rng, (V, D), D)),
        }
        self.lora: dict[str, LoraLinear] = {}
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            for name in ("ln1", "ln2"):
                self.base[pre + name + ".gamma"] = Array(np.ones(D))
                self.base[pre + name + ".beta"] = Array(np.zeros(D))
            for name in ("q", "k", "v", "o"):
                self.base[pre + name + ".W"] = Array(uniform_init(rng, (D, D), D))
            self.base[pre + "ffn.w1"] = Array(uniform_init(rng, (F, D), D))
            self.base[pre + "ffn.w2"] = Array(uniform_init(rng, (D, F), F))
        lora_rng = np.random.default_rng(seed + 7919)
        for i in range(cfg.layers):
            for name in ("q", "v"):
                key = f"layers.{i}.{name}"
                m = make_lora(np.zeros((D, D)), cfg.lora_rank, cfg.lora_alpha, lora_rng)
                m.W = self.base[key + ".W"]
                self.lora[key] = m
        for name, a in self.base.items():
            a.name = name
        self.freeze_base()

    # -- parameter management -------------------------------------------------

    def _set(self, arrays, flag: bool) -> None:
        for a in arrays:
            a.requires_grad = flag
            a.grad = np.zeros_like(a.data) if flag else None

    def freeze_base(self) -> None:
        self._set(self.base.values(), False)

    def unfreeze_base(self) -> None:
        self._set(self.base.values(), True)

    def set_lora_trainable(self, flag: bool) -> None:
        self._set(self.lora_parameters(), flag)

    def lora_parameters(self) -> list[Array]:
        out = []
        for m in self.lora.values():
            out += [m.A, m.B]
        return out

    def lora_named(self) -> dict[str, Array]:
        out = {}
        for key, m in self.lora.items():
            out[key + ".A"] = m.A
            out[key + ".B"] = m.B
        return out

    def base_parameters(self) -> list[Array]:
        return list(self.base.values())

    def to(self, dtype) -> "Decoder":
        T.cast_(list(self.base.values()) + self.lora_parameters(), dtype)
        return self

    @property
    def dtype(self):
        return self.base["head"].data.dtype

    def reset_lora(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for m in self.lora.values():
            m.A.data = rng.normal(0.0, 1.0 / np.sqrt(m.rank), size=m.A.shape).astype(m.A.data.dtype)
            m.B.data = np.zeros_like(m.B.data)
            m.A.zero_grad()
            m.B.zero_grad()

    def fork(self, lora_seed: int) -> "Decoder":
        """A decoder sharing this one's base arrays, with its own fresh LoRA factors."""
        other = object.__new__(Decoder)
        other.cfg = self.cfg
        other.base = self.base
        rng = np.random.default_rng(lora_seed)
        other.lora = {}
        for key, m in self.lora.items():
            f = make_lora(np.zeros(m.W.shape), m.rank, m.alpha, rng)
            f.W = m.W
            T.cast_([f.A, f.B], m.W.data.dtype)
            other.lora[key] = f
        return other

    # -- forward ----------------------------------------------------------------

    def embed(self, ids: np.ndarray) -> Array:
        return T.embedding_lookup(self.base["tok_emb"], ids)

    def forward_embeddings(self, x: Array, pos_offset: int = 0) -> Array:
        """Run the layer stack on input embeddings (..., S, D) and return logits."""
        cfg, p = self.cfg, self.base
        S = x.shape[-2]
        if pos_offset + S > cfg.max_seq_len:
            raise ValueError(f"sequence length {pos_offset + S} exceeds max_seq_len {cfg.max_seq_len}")
        h = x + p["pos_emb"][pos_offset : pos_offset + S]
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            a = T.layer_norm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
            q = lora_forward(a, self.lora[pre + "q"])
            with T.mac_tag("proj"):
                k = T.linear(a, p[pre + "k.W"])
            v = lora_forward(a, self.lora[pre + "v"])
            mixed = attention(q, k, v, cfg.heads, causal=True)
            with T.mac_tag("proj"):
                h = h + T.linear(mixed, p[pre + "o.W"])
            f = T.layer_norm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
            with T.mac_tag("ffn"):
                f = T.linear(T.gelu(T.linear(f, p[pre + "ffn.w1"])), p[pre + "ffn.w2"])
            h = h + f
        h = T.layer_norm(h, p["ln_f.gamma"], p["ln_f.beta"])
        with T.mac_tag("head"):
            return T.linear(h, p["head"])

    def build_input(self, visual: Array | None, prompt_ids, target_ids) -> Array:
        parts = []
        lead = None
        if visual is not None:
            parts.append(visual)
            lead = visual.shape[:-2]
        ids = [np.asarray(x, dtype=np.int64) for x in (prompt_ids, target_ids) if x is not None]
        for arr in ids:
            if lead is not None and arr.ndim == 1 and len(lead) == 1:
                arr = np.broadcast_to(arr, lead + arr.shape)
            if arr.shape[-1]:
                parts.append(self.embed(arr))
        if not parts:
            raise ValueError("empty decoder input")
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)

    def forward(self, visual: Array | None, prompt_ids, target_ids, pos_offset: int = 0) -> Array:
        """Logits over the full concatenated sequence (visual | prompt | targets)."""
        return self.forward_embeddings(self.build_input(visual, prompt_ids, target_ids), pos_offset)

    def num_params(self) -> int:
        return sum(a.size for a in self.base.values()) + sum(a.size for a in self.lora_parameters())


def decoder_forward(visual, prompt_ids, target_ids, decoder: Decoder) -> Array:
    return decoder.forward(visual, prompt_ids, target_ids)


def generate(
    decoder: Decoder,
    visual: Array | None,
    prompt_ids,
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    eos_id: int | None = None,
):
    """Autoregressive decoding without a cache; batched when ``visual`` is (B, K, D).

    Returns a token list (or one list per batch row) excluding the EOS token.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    batched = visual is not None and visual.ndim == 3
    B = visual.shape[0] if batched else 1
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.ndim == 1:
        prompt = np.broadcast_to(prompt, (B, prompt.shape[0])) if batched else prompt[None]
    vis = visual if batched or visual is None else Array(visual.data[None])
    rng = np.random.default_rng(seed)
    out = np.zeros((B, 0), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        for _ in range(max_new):
            logits = decoder.forward(vis, prompt, out).data[:, -1]
            if mode == "greedy":
                nxt = logits.argmax(axis=-1)
            else:
                z = logits / max(temperature, 1e-8)
                pr = np.exp(z - z.max(axis=-1, keepdims=True))
                pr /= pr.sum(axis=-1, keepdims=True)
                nxt = np.array([rng.choice(pr.shape[-1], p=row) for row in pr])
            nxt = np.where(done, eos_id if eos_id is not None else 0, nxt)
            out = np.concatenate([out, nxt[:, None]], axis=1)
            if eos_id is not None:
                done |= nxt == eos_id
                if done.all():
                    break
    seqs = []
    for row in out.tolist():
        if eos_id is not None and eos_id in row:
            row = row[: row.index(eos_id)]
        seqs.append(row)
    return seqs if batched else seqs[0]
