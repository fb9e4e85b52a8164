"""Joint compressor + LoRA optimization with per-group cosine schedules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .synth import EOS_ID, PAD_ID, PROMPT_IDS, SyntheticSample
from .tensor import Array

IGNORE = -100


class NumericError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    lr_comp: float = 2e-4
    lr_lora: float = 2e-5
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    accum_steps: int = 1
    seed: int = 0
    max_new: int = 96
    restore_best: bool = True

    def __post_init__(self):
        if self.lr_comp <= 0 or self.lr_lora <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_min > min(self.lr_comp, self.lr_lora):
            raise ValueError(f"lr_min {self.lr_min} exceeds a group learning rate")
        if self.epochs < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("epochs, batch_size and accum_steps must be >= 1")

    @property
    def step_size(self) -> int:
        return self.batch_size * self.accum_steps


# -- batches and loss ----------------------------------------------------------


@dataclass
class Batch:
    pixels: np.ndarray  # (B, H, W, 3)
    targets: np.ndarray  # (B, T) padded with PAD, fed to the decoder
    loss_targets: np.ndarray  # (B, T) padded with IGNORE
    samples: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.pixels.shape[0]


def make_batch(samples: list[SyntheticSample]) -> Batch:
    """Stack images and right-pad markup+EOS targets."""
    if not samples:
        raise ValueError("empty batch")
    seqs = [s.ids + [EOS_ID] for s in samples]
    width = max(len(q) for q in seqs)
    targets = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    loss_t = np.full((len(seqs), width), IGNORE, dtype=np.int64)
    for i, q in enumerate(seqs):
        targets[i, : len(q)] = q
        loss_t[i, : len(q)] = q
    return Batch(np.stack([s.image.pixels for s in samples]), targets, loss_t, list(samples))


def autoregressive_loss(logits: Array, target_ids, prompt_len: int, K: int, ignore_index: int = IGNORE) -> Array:
    """Mean NLL over target positions only, each sample weighted equally.

    Target t is predicted from the logits one position earlier, at sequence
    index K + prompt_len + t - 1. Visual and prompt positions never count.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.ndim == 1:
        target_ids = target_ids[None]
        logits = logits.reshape((1,) + logits.shape)
    n_targets = target_ids.shape[1]
    start = K + prompt_len - 1
    if start < 0:
        raise ValueError("first target needs at least one preceding position")
    if logits.shape[-2] < start + n_targets:
        raise ValueError(f"logits cover {logits.shape[-2]} positions, need {start + n_targets}")
    valid = target_ids != ignore_index
    counts = valid.sum(axis=1)
    if counts.sum() == 0:
        raise ValueError("empty target")
    live = int((counts > 0).sum())
    w = np.where(valid, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / live
    pred = logits[:, start : start + n_targets, :]
    return T.cross_entropy_from_logits(pred, target_ids, ignore_index=ignore_index, weights=w)


# -- schedule, clipping, optimizer ---------------------------------------------


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params: list[Array], max_norm: float = 1.0) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


def decays(name: str, a: Array) -> bool:
    """Weight decay applies to matrices only: not norms, biases or positional tables."""
    leaf = name.rsplit(".", 1)[-1]
    return a.ndim >= 2 and leaf not in ("pos", "pos_emb") and not name.endswith(("gamma", "beta"))


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, groups: dict[str, dict[str, Array]], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {(g, n): np.zeros_like(a.data) for g, ps in groups.items() for n, a in ps.items()}
        self.v = {k: np.zeros_like(m) for k, m in self.m.items()}

    def parameters(self) -> list[Array]:
        return [a for ps in self.groups.values() for a in ps.values()]

    def zero_grad(self) -> None:
        for a in self.parameters():
            a.zero_grad()

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for g, ps in self.groups.items():
            lr = lrs[g]
            for n, a in ps.items():
                m, v = self.m[(g, n)], self.v[(g, n)]
                m *= self.b1
                m += (1.0 - self.b1) * a.grad
                v *= self.b2
                v += (1.0 - self.b2) * a.grad * a.grad
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.wd and decays(n, a):
                    upd = upd + self.wd * a.data
                a.data -= lr * upd


def adamw_step(opt: AdamW, lrs: dict[str, float]) -> None:
    opt.step(lrs)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    holdout: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    best_state: dict | None = None

    COLUMNS = ("epoch", "step", "loss", "lr_comp", "lr_lora", "holdout_similarity")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.COLUMNS})


def _group_lrs(cfg: TrainConfig, step: int, total: int) -> dict[str, float]:
    return {
        "compressor": cosine_lr(step, total, cfg.lr_comp, cfg.lr_min),
        "lora": cosine_lr(step, total, cfg.lr_lora, cfg.lr_min),
    }


def train_step(model, opt: AdamW, samples: list, cfg: TrainConfig, lrs: dict[str, float], rng) -> float:
    """One optimizer step over ``samples``, split into micro-batches of ``cfg.batch_size``.

    Each micro-batch loss is scaled by its share of the step so the summed
    gradient equals that of a single batch over all samples.
    """
    opt.zero_grad()
    total = 0.0
    for i in range(0, len(samples), cfg.batch_size):
        micro = samples[i : i + cfg.batch_size]
        loss = model.loss(make_batch(micro), train=True, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            T.TAPE.clear()
            raise NumericError(f"non-finite loss {value} at optimizer step {opt.t}")
        share = len(micro) / len(samples)
        T.backward(loss * share)
        total += value * share
    clip_grad_norm(opt.parameters(), cfg.grad_clip)
    opt.step(lrs)
    return total


def fit(dataset: list, model, cfg: TrainConfig, holdout: list | None = None, log=None) -> TrainReport:
    """Train the model's compressor and LoRA groups on ``dataset``.

    After each epoch the held-out render similarity is measured (if a holdout
    set is given) and the best-scoring trainable state is kept.
    """
    if not dataset:
        raise ValueError("empty training set")
    opt = AdamW(model.named_groups(), cfg.betas, cfg.eps, cfg.weight_decay)
    if not opt.parameters():
        raise ValueError("model has no trainable parameters")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.step_size)
    total = steps_per_epoch * cfg.epochs
    report = TrainReport()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.step_size : (s + 1) * cfg.step_size]
            lrs = _group_lrs(cfg, step, total)
            loss = train_step(model, opt, [dataset[i] for i in idx], cfg, lrs, rng)
            losses.append(loss)
            step += 1
            report.rows.append(
                dict(epoch=epoch, step=step, loss=loss, lr_comp=lrs["compressor"], lr_lora=lrs["lora"], holdout_similarity="")
            )
        report.epoch_loss.append(float(np.mean(losses)))
        if holdout:
            score = float(np.mean(model.score(holdout, cfg.max_new)))
            report.holdout.append(score)
            report.rows[-1]["holdout_similarity"] = score
            if score > report.best_score:
                report.best_score, report.best_epoch = score, epoch
                report.best_state = model.trainable_snapshot()
        if log:
            log(f"epoch {epoch}: loss {report.epoch_loss[-1]:.4f}" + (f" holdout {report.holdout[-1]:.4f}" if holdout else ""))
    if cfg.restore_best and report.best_state is not None:
        model.load_trainable(report.best_state)
    return report


def overfit_batch(model, samples: list, steps: int, lr_comp: float, lr_lora: float) -> list[float]:
    """Repeatedly fit one batch at constant learning rates; returns the loss trace."""
    opt = AdamW(model.named_groups(), weight_decay=0.0)
    batch = make_batch(samples)
    trace = []
    for _ in range(steps):
        opt.zero_grad()
        loss = model.loss(batch, train=False)
        trace.append(float(loss.data))
        T.backward(loss)
        clip_grad_norm(opt.parameters(), 1.0)
        opt.step({"compressor": lr_comp, "lora": lr_lora})
    return trace


# -- base decoder pretraining -------------------------------------------------------


def pooled_visual(pixels: np.ndarray, encoder, grid: tuple[int, int]) -> Array:
    """Encoder tokens average-pooled to ``grid``: the variable-resolution input of the base model."""
    from .encoder import encode_pixels

    vt = encode_pixels(pixels, encoder)
    f = vt.tokens.data.reshape(-1, vt.grid_h, vt.grid_w, vt.tokens.shape[-1]).transpose(0, 3, 1, 2)
    if grid != (vt.grid_h, vt.grid_w):
        f = T.adaptive_avg_pool2d(Array(f), *grid).data
    return Array(f.reshape(f.shape[0], f.shape[1], -1).transpose(0, 2, 1))


def pretrain_decoder(
    decoder,
    samples: list,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    encoder=None,
    grids: tuple = ((16, 16), (8, 8), (4, 4)),
    log=None,
) -> list[float]:
    """Fit the decoder base on [visual | prompt | markup | EOS] sequences.

    With an encoder, each batch carries the encoder tokens pooled to a grid
    drawn from ``grids``, so the base learns to read visual prefixes of
    several lengths. Without one the base is a plain language model and each
    batch starts at a random position offset. The base is frozen afterwards.
    """
    rng = np.random.default_rng(seed)
    decoder.unfreeze_base()
    decoder.set_lora_trainable(False)
    opt = AdamW({"base": dict(decoder.base)}, weight_decay=0.01)
    trace = []
    P = len(PROMPT_IDS)
    try:
        for s in range(steps):
            pick = rng.integers(0, len(samples), size=batch_size)
            batch = make_batch([samples[i] for i in pick])
            prompt = np.tile(PROMPT_IDS, (batch_size, 1))
            if encoder is None:
                vis, K = None, 0
                S = P + batch.targets.shape[1]
                offset = int(rng.integers(0, decoder.cfg.max_seq_len - S + 1))
            else:
                grid = tuple(grids[int(rng.integers(0, len(grids)))])
                vis, offset = pooled_visual(batch.pixels, encoder, grid), 0
                K = grid[0] * grid[1]
            opt.zero_grad()
            logits = decoder.forward(vis, prompt, batch.targets, pos_offset=offset)
            loss = autoregressive_loss(logits, batch.loss_targets, P, K)
            value = float(loss.data)
            if not math.isfinite(value):
                T.TAPE.clear()
                raise NumericError(f"non-finite pretraining loss at step {s}")
            trace.append(value)
            T.backward(loss)
            clip_grad_norm(opt.parameters(), 1.0)
            opt.step({"base": cosine_lr(s, steps, lr, lr * 0.05)})
            if log and (s + 1) % 100 == 0:
                log(f"pretrain step {s + 1}: loss {np.mean(trace[-100:]):.4f}")
    finally:
        decoder.freeze_base()
    return trace
