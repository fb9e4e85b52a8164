"""Command-line entry point: data generation, training, evaluation and reporting."""

from __future__ import annotations

import argparse
import ast
import contextlib
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .compressor import DEFAULT_WEIGHTS, build_element_mask
from .pipeline import ModelConfig
from .synth import GenConfig, gen_dataset, read_dataset, write_dataset
from .training import NumericError, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CSV_HELP = """\
CSV schemas:
  results.csv   method,tokens,compression,similarity,ci_low,ci_high,prefill_flops,
                prefill_ms,gen_ms,n,sim_<page type>...  (+ K, reference_compression,
                final_loss, trainable_params where applicable)
  scores_*.csv  index,page_type,similarity   (raw per-sample scores)
  train_*.csv   epoch,step,loss,lr_comp,lr_lora,holdout_similarity
  flops.csv     visual_tokens,prompt_len,D,layers,projections,attention,ffn,per_layer,total

Config files hold key=value lines (# comments allowed). Keys are fields of the
model config (height, width, patch_size, D, K, groups, dec_layers, lora_rank, dtype, ...),
the training config (epochs, lr_comp, lr_lora, batch_size, accum_steps, ...) or
pretrain_steps / pretrain_lr / holdout.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric failure (NaN).
"""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config -------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    pretrain_steps: int = 3000
    pretrain_lr: float = 5e-3
    holdout: int = 32


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = ast.literal_eval(v)
        except (ValueError, SyntaxError):
            out[k] = v
    return out


def load_run_config(path: str | None, seed: int) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    mfields = {f.name for f in dataclasses.fields(ModelConfig)}
    tfields = {f.name for f in dataclasses.fields(TrainConfig)}
    rfields = {"pretrain_steps", "pretrain_lr", "holdout"}
    unknown = set(values) - mfields - tfields - rfields
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    m = {k: v for k, v in values.items() if k in mfields}
    m.setdefault("D", 64)
    m.setdefault("lora_rank", 16)
    m.setdefault("lora_alpha", 32.0)
    m.setdefault("dtype", "float32")
    m.setdefault("seed", seed)
    if isinstance(m.get("pool_grid"), list):
        m["pool_grid"] = tuple(m["pool_grid"])
    t = {k: v for k, v in values.items() if k in tfields}
    t.setdefault("seed", seed)
    t.setdefault("lr_comp", 3e-3)
    t.setdefault("lr_lora", 5e-3)
    t.setdefault("batch_size", 4)
    if isinstance(t.get("betas"), list):
        t["betas"] = tuple(t["betas"])
    r = {k: v for k, v in values.items() if k in rfields}
    return RunConfig(ModelConfig(**m), TrainConfig(**t), **r)


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 64x64, got {text!r}")
    return h, w


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _split(samples: list, holdout: int) -> tuple[list, list]:
    if holdout >= len(samples):
        raise ValueError(f"holdout {holdout} leaves no training samples out of {len(samples)}")
    return samples[: len(samples) - holdout], samples[len(samples) - holdout :]


def _check_dims(rc: RunConfig, samples: list, path) -> None:
    h, w = samples[0].image.height_px, samples[0].image.width_px
    if (h, w) != (rc.model.height, rc.model.width):
        raise ValueError(f"{path} holds {h}x{w} images but the model config expects {rc.model.height}x{rc.model.width}")


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    h, w = a.dims
    cfg = GenConfig(height=h, width=w, patch_size=a.patch_size)
    samples = gen_dataset(a.seed, a.count, cfg)
    vocab = write_dataset(a.out, samples)
    print(f"wrote {len(samples)} samples to {a.out} (vocabulary: {vocab})")
    return EXIT_OK


def _base_for(a, rc: RunConfig, train: list):
    from .harness import load_base, prepare_base, save_base

    if a.base:
        mc, base = load_base(a.base)
        return mc, base
    base = prepare_base(rc.model, train, rc.pretrain_steps, rc.pretrain_lr, rc.model.seed, log=_log)
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        save_base(Path(a.out) / "base.uipt", rc.model, base)
    return rc.model, base


def cmd_train(a) -> int:
    from .harness import ExperimentConfig, build_model, save_checkpoint
    from .training import fit

    rc = load_run_config(a.config, a.seed)
    samples = read_dataset(a.data)
    _check_dims(rc, samples, a.data)
    train, hold = _split(samples, rc.holdout)
    mc, base = _base_for(a, rc, train)
    exp = ExperimentConfig(a.method, K=mc.K, pool_grid=mc.pool_grid, scale=a.scale, fraction=a.fraction,
                           toggles=tuple(a.toggles or ()), seed=a.seed)
    model = build_model(mc, *base, exp)
    report = fit(train, model, rc.train, holdout=hold or None, log=_log)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "train_log.csv")
    save_checkpoint(out / "model.uipt", model, exp)
    print(f"final epoch loss {report.epoch_loss[-1]:.4f}; checkpoint {out / 'model.uipt'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .harness import evaluate, load_checkpoint
    from .report import write_results

    model, exp = load_checkpoint(a.checkpoint)
    samples = read_dataset(a.data)
    row = evaluate(model, samples, exp.name, a.seed, out_dir=a.out)
    Path(a.out).mkdir(parents=True, exist_ok=True)
    write_results(Path(a.out) / "results.csv", [row])
    print(f"{row.method}: similarity {row.similarity:.4f} [{row.ci_low:.4f}, {row.ci_high:.4f}] "
          f"tokens {row.tokens} prefill {row.prefill_flops} FLOPs")
    return EXIT_OK


def cmd_sweep_k(a) -> int:
    from .harness import run_sweep_k
    from .report import report

    rc = load_run_config(a.config, a.seed)
    samples = read_dataset(a.data)
    _check_dims(rc, samples, a.data)
    train, hold = _split(samples, rc.holdout)
    mc, base = _base_for(a, rc, train)
    rows = run_sweep_k(mc, base, train, hold, rc.train, Ks=a.ks, seed=a.seed, out_dir=a.out)
    paths = report(rows, a.out)
    for r in rows:
        print(f"K={r.extra['K']}: similarity {r.similarity:.4f} FLOPs {r.prefill_flops}")
    print(f"results: {paths['csv']}")
    return EXIT_OK


def cmd_ablate(a) -> int:
    from .harness import run_ablation
    from .report import report

    rc = load_run_config(a.config, a.seed)
    samples = read_dataset(a.data)
    _check_dims(rc, samples, a.data)
    train, hold = _split(samples, rc.holdout)
    mc, base = _base_for(a, rc, train)
    variants = [tuple(v.split("+")) for v in a.variants]
    rows = run_ablation(variants, mc, base, train, hold, rc.train, seed=a.seed, out_dir=a.out)
    report(rows, a.out)
    for r in rows:
        print(f"{r.method}: similarity {r.similarity:.4f} trainable {r.extra['trainable_params']}")
    return EXIT_OK


def cmd_flops(a) -> int:
    from .complexity import PrefillSpec, compression_ratio, flops_prefill, format_ratio, speedup

    spec_n = PrefillSpec(a.n, a.p, a.d, a.layers, a.ffn_width)
    spec_k = PrefillSpec(a.k, a.p, a.d, a.layers, a.ffn_width)
    exact, approx = speedup(spec_n, spec_k)
    lines = []
    for label, spec in (("N", spec_n), ("K", spec_k)):
        r = flops_prefill(spec)
        lines.append((label, spec, r))
        print(f"{label}={spec.visual_tokens}: projections {r.layer.projections} attention {r.layer.attention} "
              f"ffn {r.layer.ffn} per-layer {r.per_layer} total {r.total}")
    print(f"speedup exact {exact:.2f} approx {approx:.2f}; compression {format_ratio(compression_ratio(a.n, a.k))}")
    if a.csv:
        import csv

        with open(a.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["visual_tokens", "prompt_len", "D", "layers", "projections", "attention", "ffn", "per_layer", "total"])
            for _, spec, r in lines:
                w.writerow([spec.visual_tokens, spec.prompt_len, spec.D, spec.layers, r.layer.projections,
                            r.layer.attention, r.layer.ffn, r.per_layer, r.total])
    return EXIT_OK


def cmd_mask(a) -> int:
    from .tensor import conv_out_size

    samples = read_dataset(a.data)
    if not 0 <= a.index < len(samples):
        raise ValueError(f"sample index {a.index} out of range for {len(samples)} samples")
    s = samples[a.index]
    gh, gw = s.image.height_px // a.patch_size, s.image.width_px // a.patch_size
    for _ in range(a.blocks):
        gh, gw = conv_out_size(gh), conv_out_size(gw)
    m = build_element_mask(s.annotation, (s.image.height_px, s.image.width_px), (gh, gw), DEFAULT_WEIGHTS)
    grid = m.weights.data[0]
    for row in grid:
        print(" ".join(f"{v:.1f}" for v in row))
    if a.out:
        np.savetxt(a.out, grid, fmt="%.1f", delimiter=",")
    return EXIT_OK


def cmd_report(a) -> int:
    from .report import page_type_table, read_results, report

    rows = read_results(a.results)
    if not rows:
        raise ValueError(f"{a.results} has no rows")
    paths = report(rows, a.out)
    print(page_type_table(rows))
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")

    p = Parser(prog="uipress", description="Visual token compression experiments on synthetic UI pages.",
               epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    fmt = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file", epilog=CSV_HELP, formatter_class=fmt)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--dims", type=_dims, default=(64, 64), help="HxW, e.g. 64x64")
    g.add_argument("--patch-size", type=int, default=4)
    g.set_defaults(func=cmd_gen_data, need_out=True)

    def model_args(sp):
        sp.add_argument("--data", required=True, help="dataset file from gen-data")
        sp.add_argument("--base", help="pretrained base checkpoint (pretrained from --data if absent)")

    t = sub.add_parser("train", parents=[common], help="train one arm", epilog=CSV_HELP, formatter_class=fmt)
    model_args(t)
    t.add_argument("--method", default="uipress", choices=["uipress", "topk_norm", "feature_zero", "resolution", "uncompressed"])
    t.add_argument("--scale", type=int, default=2)
    t.add_argument("--fraction", type=float, default=0.75)
    t.add_argument("--toggles", nargs="*", help="ablation toggles")
    t.set_defaults(func=cmd_train, need_out=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint", epilog=CSV_HELP, formatter_class=fmt)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval, need_out=True)

    s = sub.add_parser("sweep-k", parents=[common], help="train and evaluate one compressor per K", epilog=CSV_HELP, formatter_class=fmt)
    model_args(s)
    s.add_argument("--ks", type=int, nargs="+", default=[64, 128, 256, 512])
    s.set_defaults(func=cmd_sweep_k, need_out=True)

    ab = sub.add_parser("ablate", parents=[common], help="component ablations", epilog=CSV_HELP, formatter_class=fmt)
    model_args(ab)
    ab.add_argument("--variants", nargs="+", default=["no_lora", "no_refine", "std_conv", "lora_only"],
                    help="toggle sets, '+'-joined for combinations")
    ab.set_defaults(func=cmd_ablate, need_out=True)

    f = sub.add_parser("flops", parents=[common], help="analytic prefill FLOPs and speedup", epilog=CSV_HELP, formatter_class=fmt)
    f.add_argument("--n", type=int, default=6517)
    f.add_argument("--k", type=int, default=256)
    f.add_argument("--p", type=int, default=64)
    f.add_argument("--d", type=int, default=4096)
    f.add_argument("--layers", type=int, default=32)
    f.add_argument("--ffn-width", type=int, default=None)
    f.add_argument("--csv", help="also write the breakdown as CSV")
    f.set_defaults(func=cmd_flops, need_out=False)

    m = sub.add_parser("mask", parents=[common], help="print the element mask of one sample", epilog=CSV_HELP, formatter_class=fmt)
    m.add_argument("--data", required=True)
    m.add_argument("--index", type=int, default=0)
    m.add_argument("--patch-size", type=int, default=4)
    m.add_argument("--blocks", type=int, default=2, help="stride-2 conv blocks before masking")
    m.set_defaults(func=cmd_mask, need_out=False)

    r = sub.add_parser("report", parents=[common], help="tables and plots from results.csv", epilog=CSV_HELP, formatter_class=fmt)
    r.add_argument("--results", required=True)
    r.set_defaults(func=cmd_report, need_out=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    if a.need_out and not a.out:
        parser.error(f"{a.command} needs --out")
    try:
        with _single_thread(a.deterministic):
            return a.func(a)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
