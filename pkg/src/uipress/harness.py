"""Experiment runner: method comparisons, K-sweeps and component ablations."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .complexity import REFERENCE_N, PrefillSpec, compression_ratio, flops_prefill, format_ratio
from .compressor import Compressor, pool_grid_for
from .pipeline import METHODS, ModelConfig, UIPressModel, build_base
from .synth import PAGE_TYPES, PROMPT_IDS
from .tensor import load_arrays, save_arrays
from .training import TrainConfig, TrainReport, fit, make_batch

ABLATION_TOGGLES = ("no_lora", "no_refine", "std_conv", "lora_only", "compressor_only")
SWEEP_KS = (64, 128, 256, 512)
# Rectangular pool grids for budgets that are not perfect squares.
SWEEP_GRIDS = {64: (8, 8), 128: (8, 16), 256: (16, 16), 512: (16, 32)}


@dataclass
class ExperimentConfig:
    method: str = "uipress"
    K: int = 16
    pool_grid: tuple | None = None
    scale: int = 2
    fraction: float = 0.75
    toggles: tuple = ()
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in ("uipress", "topk_norm") and self.K < 1:
            raise ValueError("K must be positive")
        if self.method == "uipress" and self.pool_grid is None:
            pool_grid_for(self.K)
        if self.method == "resolution" and self.scale < 1:
            raise ValueError("scale factor must be >= 1")
        if self.method == "feature_zero" and not 0.0 <= self.fraction < 1.0:
            raise ValueError("zero fraction must be in [0, 1)")
        validate_toggles(self.toggles)

    @property
    def method_param(self):
        return {"uipress": None, "topk_norm": self.K, "feature_zero": self.fraction, "resolution": self.scale}.get(self.method)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.toggles:
            return "+".join(self.toggles)
        return self.method


@dataclass
class ResultRow:
    method: str
    tokens: int
    compression: str
    similarity: float
    ci_low: float
    ci_high: float
    prefill_flops: int
    prefill_ms: float
    gen_ms: float
    n: int
    page_types: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "method": self.method,
            "tokens": self.tokens,
            "compression": self.compression,
            "similarity": self.similarity,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "prefill_flops": self.prefill_flops,
            "prefill_ms": self.prefill_ms,
            "gen_ms": self.gen_ms,
            "n": self.n,
        }
        for pt in PAGE_TYPES:
            d[f"sim_{pt}"] = self.page_types.get(pt, "")
        d.update(self.extra)
        return d


def validate_toggles(toggles) -> None:
    ts = set(toggles)
    unknown = ts - set(ABLATION_TOGGLES)
    if unknown:
        raise ValueError(f"unknown ablation toggles {sorted(unknown)}")
    if "lora_only" in ts and ts & {"no_lora", "compressor_only", "no_refine", "std_conv"}:
        raise ValueError(f"contradictory toggles {sorted(ts)}: lora_only bypasses the compressor")


def bootstrap_ci(scores, n_resamples: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    m = x.mean()
    return float(min(lo, m)), float(max(hi, m))


def page_type_means(page_types: list[str], scores) -> dict[str, float]:
    out = {}
    for pt in PAGE_TYPES:
        vals = [s for t, s in zip(page_types, scores) if t == pt]
        if vals:
            out[pt] = float(np.mean(vals))
    return out


# -- model construction ----------------------------------------------------------------


def build_model(mc: ModelConfig, encoder, decoder, exp: ExperimentConfig) -> UIPressModel:
    """One comparison arm: shared frozen encoder/decoder base, fresh trainable parts."""
    ts = set(exp.toggles)
    dec = decoder.fork(lora_seed=exp.seed + 101)
    lora_trainable = not ts & {"no_lora", "compressor_only"}
    if "lora_only" in ts:
        return UIPressModel(mc, encoder, dec, "uncompressed", lora_trainable=True)
    compressor = None
    if exp.method == "uipress":
        ccfg = mc.compressor_config(
            K=exp.K, pool_grid=exp.pool_grid, refine="no_refine" not in ts, std_conv="std_conv" in ts
        )
        compressor = Compressor(ccfg, seed=exp.seed + 202)
    return UIPressModel(mc, encoder, dec, exp.method, exp.method_param, compressor, lora_trainable)


def prefill_spec(model: UIPressModel) -> PrefillSpec:
    d = model.decoder.cfg
    return PrefillSpec(model.n_visual_tokens(), len(PROMPT_IDS), d.D, d.layers, d.ffn_mult * d.D)


def time_prefill(model: UIPressModel, sample, runs: int = 5) -> float:
    """Median wall time in ms of one prefill forward after one warmup."""
    batch = make_batch([sample])
    model.prefill(batch)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.prefill(batch)
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def evaluate(
    model: UIPressModel,
    samples: list,
    name: str,
    seed: int = 0,
    max_new: int = 96,
    out_dir=None,
    n_resamples: int = 1000,
) -> ResultRow:
    """Score ``samples`` and aggregate into a result row; raw scores go to ``out_dir``."""
    if not samples:
        raise ValueError("empty evaluation set")
    t0 = time.perf_counter()
    scores = model.score(samples, max_new)
    gen_ms = (time.perf_counter() - t0) * 1e3 / len(samples)
    lo, hi = bootstrap_ci(scores, n_resamples, seed)
    n_full = model.cfg.grid[0] * model.cfg.grid[1]
    tokens = model.n_visual_tokens()
    types = [s.page_type for s in samples]
    row = ResultRow(
        method=name,
        tokens=tokens,
        compression=format_ratio(compression_ratio(n_full, tokens)),
        similarity=float(np.mean(scores)),
        ci_low=lo,
        ci_high=hi,
        prefill_flops=flops_prefill(prefill_spec(model)).total,
        prefill_ms=time_prefill(model, samples[0]),
        gen_ms=gen_ms,
        n=len(samples),
        page_types=page_type_means(types, scores),
    )
    if out_dir is not None:
        write_scores(Path(out_dir) / f"scores_{_slug(name)}.csv", types, scores)
    return row


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def write_scores(path, page_types: list[str], scores) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "page_type", "similarity"])
        for i, (t, s) in enumerate(zip(page_types, scores)):
            w.writerow([i, t, repr(float(s))])


def read_scores(path) -> tuple[list[str], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["page_type"] for r in rows], [float(r["similarity"]) for r in rows]


# -- experiments --------------------------------------------------------------------


def train_arm(model: UIPressModel, train: list, holdout: list | None, tcfg: TrainConfig) -> TrainReport | None:
    if not model.trainable_parameters():
        return None
    return fit(train, model, tcfg, holdout=holdout)


def run_experiment(
    exp: ExperimentConfig,
    mc: ModelConfig,
    base: tuple,
    train: list,
    eval_set: list,
    tcfg: TrainConfig,
    holdout: list | None = None,
    out_dir=None,
) -> ResultRow:
    """Build, train (if anything is trainable) and evaluate one arm."""
    encoder, decoder = base
    model = build_model(mc, encoder, decoder, exp)
    report = train_arm(model, train, holdout, replace(tcfg, seed=exp.seed))
    row = evaluate(model, eval_set, exp.name, exp.seed, tcfg.max_new, out_dir)
    if report is not None:
        row.extra["final_loss"] = report.epoch_loss[-1]
        if out_dir is not None:
            report.write_csv(Path(out_dir) / f"train_{_slug(exp.name)}.csv")
    return row


def run_sweep_k(
    mc: ModelConfig,
    base: tuple,
    train: list,
    eval_set: list,
    tcfg: TrainConfig,
    Ks=SWEEP_KS,
    seed: int = 0,
    out_dir=None,
) -> list[ResultRow]:
    """One trained compressor per token budget; rows sorted by K."""
    rows = []
    for K in sorted(Ks):
        grid = SWEEP_GRIDS.get(K)
        if grid is None:
            grid = pool_grid_for(K)
        exp = ExperimentConfig("uipress", K=K, pool_grid=grid, seed=seed, label=f"uipress_K{K}")
        row = run_experiment(exp, mc, base, train, eval_set, tcfg, out_dir=out_dir)
        row.extra["K"] = K
        row.extra["reference_compression"] = format_ratio(compression_ratio(REFERENCE_N, K))
        rows.append(row)
    return rows


def run_ablation(
    variants: list[tuple],
    mc: ModelConfig,
    base: tuple,
    train: list,
    eval_set: list,
    tcfg: TrainConfig,
    seed: int = 0,
    out_dir=None,
) -> list[ResultRow]:
    """The full model plus one row per toggle set in ``variants``."""
    for v in variants:
        validate_toggles(v)
    rows = []
    for toggles in [()] + [tuple(v) for v in variants]:
        exp = ExperimentConfig("uipress", K=mc.K, pool_grid=mc.pool_grid, toggles=toggles, seed=seed,
                               label="full" if not toggles else None)
        model = build_model(mc, base[0], base[1], exp)
        report = train_arm(model, train, None, replace(tcfg, seed=seed))
        row = evaluate(model, eval_set, exp.name, seed, tcfg.max_new, out_dir)
        row.extra["trainable_params"] = sum(a.size for a in model.trainable_parameters())
        if report is not None:
            row.extra["final_loss"] = report.epoch_loss[-1]
        rows.append(row)
    return rows


def rows_consistent(row: ResultRow) -> bool:
    return row.ci_low <= row.similarity <= row.ci_high and math.isfinite(row.similarity)


# -- checkpoints ----------------------------------------------------------------------


def prepare_base(mc: ModelConfig, samples: list, steps: int, lr: float = 5e-3, seed: int = 0, log=None) -> tuple:
    """Frozen encoder plus a decoder base pretrained to read pooled encoder tokens."""
    from .training import pretrain_decoder

    encoder, decoder = build_base(mc)
    if steps > 0:
        pretrain_decoder(decoder, samples, steps, lr=lr, seed=seed, encoder=encoder, log=log)
    return encoder, decoder


def save_base(path, mc: ModelConfig, base: tuple) -> None:
    encoder, decoder = base
    arrays = {"encoder.proj": encoder.proj, "encoder.pos": encoder.pos}
    arrays.update({f"decoder.{k}": v for k, v in decoder.base.items()})
    save_arrays(path, arrays, {"kind": "base", "model": mc.to_dict()})


def load_base(path) -> tuple[ModelConfig, tuple]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "base":
        raise ValueError(f"{path} is not a base checkpoint")
    mc = model_config_from(meta["model"])
    encoder, decoder = build_base(mc)
    targets = {"encoder.proj": encoder.proj, "encoder.pos": encoder.pos}
    targets.update({f"decoder.{k}": v for k, v in decoder.base.items()})
    _assign(targets, arrays, path)
    return mc, (encoder, decoder)


def save_checkpoint(path, model: UIPressModel, exp: ExperimentConfig) -> None:
    meta = {"kind": "model", "model": model.cfg.to_dict(), "experiment": asdict(exp)}
    save_arrays(path, model.named_state(), meta)


def load_checkpoint(path) -> tuple[UIPressModel, ExperimentConfig]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path} is not a model checkpoint")
    mc = model_config_from(meta["model"])
    e = dict(meta["experiment"])
    e["toggles"] = tuple(e.get("toggles", ()))
    if e.get("pool_grid") is not None:
        e["pool_grid"] = tuple(e["pool_grid"])
    exp = ExperimentConfig(**e)
    model = build_model(mc, *build_base(mc), exp)
    _assign(model.named_state(), arrays, path)
    return model, exp


def model_config_from(d: dict) -> ModelConfig:
    d = dict(d)
    if d.get("pool_grid") is not None:
        d["pool_grid"] = tuple(d["pool_grid"])
    return ModelConfig(**d)


def _assign(targets: dict, arrays: dict, path) -> None:
    missing = sorted(set(targets) - set(arrays))
    if missing:
        raise ValueError(f"{path} lacks {missing[:3]}")
    for k, a in targets.items():
        if arrays[k].shape != a.shape:
            raise ValueError(f"{path}: shape mismatch for {k}: {arrays[k].shape} vs {a.shape}")
        a.data = arrays[k].astype(a.data.dtype)
