"""Acceptance gate: one test class per criterion, summarised per criterion at the end of the run."""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from uipress import tensor as T
from uipress.complexity import (
    REFERENCE_N,
    PrefillSpec,
    compression_ratio,
    flops_layer,
    format_ratio,
    instrumented_macs,
    speedup,
)
from uipress.compressor import DEFAULT_WEIGHTS, Compressor, CompressorConfig, ElementAnnotation, build_element_mask, pool_grid_for
from uipress.decoder import count_lora_params, lora_forward, merge_lora
from uipress.harness import (
    ExperimentConfig,
    bootstrap_ci,
    build_model,
    evaluate,
    prefill_spec,
    read_scores,
    run_sweep_k,
)
from uipress.pipeline import ModelConfig, UIPressModel, build_base
from uipress.report import read_results, report
from uipress.synth import GenConfig, PROMPT_IDS, gen_dataset, linearize, parse_lenient, render
from uipress.tensor import Array
from uipress.training import TrainConfig, fit, make_batch, overfit_batch, pretrain_decoder

from oracles import check_grads, mask_oracle, pool_oracle, rel_error
from test_tensor import CASES

# toy configuration shared by the training and comparison criteria
TOY = ModelConfig(D=64, lora_rank=16, lora_alpha=32.0, dtype="float32")
PRETRAIN_STEPS = 3000
PRETRAIN_LR = 5e-3
TOY_TRAIN = TrainConfig(epochs=20, lr_comp=3e-3, lr_lora=5e-3, batch_size=4, restore_best=False)
N_TRAIN = 2000
N_EVAL = 64


def report_line(text: str) -> None:
    print(f"    {text}")


@pytest.fixture(scope="session")
def toy_base():
    encoder, decoder = build_base(TOY)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        pretrain_decoder(decoder, gen_dataset(1, N_TRAIN), PRETRAIN_STEPS, lr=PRETRAIN_LR, encoder=encoder)
    report_line(f"base pretraining: {PRETRAIN_STEPS} steps in {time.perf_counter() - t0:.0f} s")
    return encoder, decoder


@pytest.fixture(scope="session")
def toy_train_set():
    return gen_dataset(1, N_TRAIN)


def train_toy(base, train, method="uipress"):
    model = build_model(TOY, *base, ExperimentConfig(method, K=TOY.K, seed=0))
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        rep = fit(train, model, TOY_TRAIN)
    return model, rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_runs(toy_base, toy_train_set):
    return [train_toy(toy_base, toy_train_set) for _ in range(2)]


def tiny_fd_model(seed):
    mc = ModelConfig(height=32, width=32, D=8, K=4, groups=4, comp_heads=2, dec_layers=1, dec_heads=2,
                     lora_rank=2, lora_alpha=4.0, dropout=0.0, max_seq_len=96, seed=seed)
    enc, dec = build_base(mc)
    model = UIPressModel(mc, enc, dec, "uipress", compressor=Compressor(mc.compressor_config(), seed=seed))
    rng = np.random.default_rng(seed)
    for m in dec.lora.values():
        m.B.data = rng.normal(0, 0.1, size=m.B.shape)
    return model


@pytest.mark.criterion(1)
class TestGradientCorrectness:
    def test_ops_and_full_graph(self):
        t0 = time.perf_counter()
        worst_op = 0.0
        for case in CASES:
            for seed in range(10):
                params, fn = case(np.random.default_rng(seed))
                worst_op = max(worst_op, check_grads(fn, params))
        worst_graph = 0.0
        for seed in range(10):
            model = tiny_fd_model(seed)
            batch = make_batch(gen_dataset(seed, 2, GenConfig(height=32, width=32, max_rows=2)))
            worst_graph = max(worst_graph, check_grads(lambda: model.loss(batch), model.trainable_parameters()))
        elapsed = time.perf_counter() - t0
        report_line(f"{len(CASES)} ops worst rel err {worst_op:.2e}; full graph {worst_graph:.2e}; {elapsed:.0f} s")
        assert worst_op <= 1e-4
        assert worst_graph <= 1e-4
        assert elapsed < 120


@pytest.mark.criterion(2)
class TestMaskOracle:
    def test_100_random_annotations(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            H, W = (int(v) for v in rng.integers(4, 97, size=2))
            h, w = (int(v) for v in rng.integers(1, 17, size=2))
            boxes, cats = [], []
            for _ in range(int(rng.integers(0, 11))):
                x0, y0 = int(rng.integers(0, W)), int(rng.integers(0, H))
                x1, y1 = int(rng.integers(x0 + 1, W + 1)), int(rng.integers(y0 + 1, H + 1))
                boxes.append((x0, y0, x1, y1))
                cats.append(str(rng.choice(["text", "button", "icon", "input"])))
            got = build_element_mask(ElementAnnotation(boxes, cats), (H, W), (h, w)).weights.data[0]
            want = mask_oracle(boxes, cats, (H, W), (h, w), DEFAULT_WEIGHTS)
            np.testing.assert_array_equal(got, want)
            assert set(np.unique(got)) <= {1.0, 0.5, 0.2}


@pytest.mark.criterion(3)
class TestPoolingOracle:
    def test_exhaustive_small_shapes(self):
        rng = np.random.default_rng(0)
        n = 0
        for H in range(1, 13):
            for W in range(1, 13):
                x = rng.normal(size=(2, H, W))
                for oh in range(1, H + 1):
                    for ow in range(1, W + 1):
                        got = T.adaptive_avg_pool2d(Array(x[None]), oh, ow).data[0]
                        np.testing.assert_array_equal(got, pool_oracle(x, oh, ow))
                        n += 1
        report_line(f"{n} (H, W, out) combinations exact")

    def test_k256_grid(self):
        assert pool_grid_for(256) == (16, 16)
        comp = Compressor(CompressorConfig(D=8, K=256, groups=4, heads=2))
        out = comp.forward(Array(np.random.default_rng(0).normal(size=(64 * 64, 8))), 64, 64, np.ones((1, 16, 16)))
        assert out.shape == (256, 8)


@pytest.mark.criterion(4)
class TestAnalyticConstants:
    def test_reference_speedup(self):
        _, approx = speedup(PrefillSpec(REFERENCE_N, 64, 4096, 32), PrefillSpec(256, 64, 4096, 32))
        report_line(f"approx speedup {approx:.4f}")
        assert approx == pytest.approx(648.07, abs=0.1)

    def test_reference_compression(self):
        r = compression_ratio(REFERENCE_N, 256)
        assert round(r, 2) == 25.46
        assert format_ratio(r) == "25.5x"

    def test_instrumented_equals_analytic(self):
        enc, dec = build_base(TOY)
        S = TOY.K + len(PROMPT_IDS)
        macs = instrumented_macs(dec, S)
        counted = macs["proj"] + macs["attention"] + macs["ffn"]
        analytic = TOY.dec_layers * flops_layer(PrefillSpec(TOY.K, len(PROMPT_IDS), TOY.D, TOY.dec_layers)).total
        report_line(f"instrumented MACs {counted}, FLOPs {2 * counted}; analytic {analytic}")
        assert analytic in (counted, 2 * counted)


@pytest.mark.criterion(5)
class TestLoraContracts:
    def test_step0_matches_frozen(self):
        mc = ModelConfig(D=16, groups=4, comp_heads=4, lora_rank=4, lora_alpha=8.0)
        enc, dec = build_base(mc)
        model = build_model(mc, enc, dec, ExperimentConfig("uipress", K=16, seed=3))
        vis = Array(np.random.default_rng(0).normal(size=(2, 16, 16)))
        targets = np.random.default_rng(1).integers(0, 20, size=(2, 12))
        with T.no_grad():
            adapted = model.decoder.forward(vis, PROMPT_IDS, targets).data
        frozen = dec.fork(0)
        for m in frozen.lora.values():
            m.A.data = np.zeros_like(m.A.data)
        with T.no_grad():
            base = frozen.forward(vis, PROMPT_IDS, targets).data
        assert np.max(np.abs(adapted - base)) == 0.0

    def test_merged_vs_factored(self):
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            dec = build_base(ModelConfig(D=32, lora_rank=8, lora_alpha=16.0))[1].fork(seed)
            for m in dec.lora.values():
                m.B.data = rng.normal(size=m.B.shape)
                x = Array(rng.normal(size=(5, 32)))
                worst = max(worst, rel_error(lora_forward(x, m).data, T.linear(x, merge_lora(m)).data))
        assert worst <= 1e-6

    def test_param_count_structural(self):
        _, dec = build_base(TOY)
        structural = sum(p.size for p in dec.lora_parameters())
        assert count_lora_params(TOY.dec_layers, TOY.lora_rank, TOY.D) == structural

    def test_frozen_weights_zero_gradient(self):
        mc = ModelConfig(height=32, width=32, D=16, K=4, groups=4, comp_heads=4, dec_layers=1, dec_heads=2, lora_rank=4, lora_alpha=8.0)
        enc, dec = build_base(mc)
        before = {k: a.data.copy() for k, a in dec.base.items()}
        model = build_model(mc, enc, dec, ExperimentConfig("uipress", K=4))
        batch = make_batch(gen_dataset(0, 4, GenConfig(height=32, width=32)))
        for _ in range(3):
            T.backward(model.loss(batch, train=True, rng=np.random.default_rng(0)))
            for a in list(dec.base.values()) + [enc.proj, enc.pos]:
                assert a.grad is None or not np.any(a.grad)
        fit(gen_dataset(1, 8, GenConfig(height=32, width=32)), model, TrainConfig(epochs=2, batch_size=4, lr_comp=1e-2, lr_lora=1e-2))
        for k, a in dec.base.items():
            np.testing.assert_array_equal(a.data, before[k])


@pytest.mark.criterion(6)
class TestTrainingSanity:
    def test_overfit_one_batch(self, toy_base):
        model = build_model(TOY, *toy_base, ExperimentConfig("uipress", K=TOY.K, seed=0))
        with threadpool_limits(limits=1):
            trace = overfit_batch(model, gen_dataset(1, 8), 200, 5e-3, 5e-3)
        report_line(f"overfit loss {trace[0]:.4f} -> {trace[-1]:.4f}")
        assert trace[-1] < 0.05

    def test_full_run_halves_nll(self, toy_runs):
        _, rep, seconds = toy_runs[0]
        first, last = rep.epoch_loss[0], rep.epoch_loss[-1]
        report_line(f"epoch-1 NLL {first:.4f}, final {last:.4f}, ratio {last / first:.3f}, {seconds:.0f} s")
        assert len(rep.epoch_loss) == 20
        assert last <= 0.5 * first
        assert seconds < 1800

    def test_same_seed_bit_identical(self, toy_runs):
        (m1, r1, _), (m2, r2, _) = toy_runs
        assert [r["loss"] for r in r1.rows] == [r["loss"] for r in r2.rows]
        s1, s2 = m1.trainable_snapshot(), m2.trainable_snapshot()
        assert s1.keys() == s2.keys()
        for k in s1:
            assert s1[k].tobytes() == s2[k].tobytes()


@pytest.mark.criterion(7)
class TestDirectionalComparison:
    def test_compressor_not_worse_than_topk(self, toy_base, toy_runs, toy_train_set):
        compressed = toy_runs[0][0]
        topk, _, _ = train_toy(toy_base, toy_train_set, method="topk_norm")
        assert topk.decoder.base is compressed.decoder.base
        held_out = gen_dataset(99, N_EVAL)
        with threadpool_limits(limits=1):
            a = evaluate(compressed, held_out, "uipress")
            b = evaluate(topk, held_out, "topk_norm")
        report_line(f"held-out similarity uipress {a.similarity:.4f} vs topk_norm {b.similarity:.4f} at K={TOY.K}")
        assert a.tokens == b.tokens == TOY.K
        assert a.similarity >= b.similarity - 0.02

    def test_feature_zero_flops_equal_uncompressed(self, toy_base):
        fz = build_model(TOY, *toy_base, ExperimentConfig("feature_zero", fraction=0.75))
        full = build_model(TOY, *toy_base, ExperimentConfig("uncompressed"))
        a, b = prefill_spec(fz), prefill_spec(full)
        assert a == b
        assert flops_layer(a).total == flops_layer(b).total


@pytest.mark.criterion(8)
class TestSweepShape:
    def test_four_point_sweep(self, tmp_path):
        mc = ModelConfig(height=256, width=512, D=8, groups=4, comp_heads=2, dec_layers=1, dec_heads=2,
                         lora_rank=2, lora_alpha=4.0, max_seq_len=640, dtype="float32")
        gen = GenConfig(height=256, width=512, max_rows=2)
        base = build_base(mc)
        tcfg = TrainConfig(epochs=1, batch_size=2, lr_comp=1e-3, lr_lora=1e-4, max_new=8)
        rows = run_sweep_k(mc, base, gen_dataset(11, 2, gen), gen_dataset(12, 3, gen), tcfg, out_dir=tmp_path)
        paths = report(rows, tmp_path)
        assert [r.extra["K"] for r in rows] == [64, 128, 256, 512]
        flops = [r.prefill_flops for r in rows]
        assert all(a < b for a, b in zip(flops, flops[1:]))
        table = read_results(paths["csv"])
        assert len(table) == 4
        for line in table:
            for col in ("similarity", "ci_low", "ci_high", "prefill_flops", "prefill_ms", "K", "reference_compression"):
                assert line[col] != ""
            assert float(line["ci_low"]) <= float(line["similarity"]) <= float(line["ci_high"])
        assert [line["reference_compression"] for line in table] == ["102x", "51x", "25.5x", "12.7x"]
        _, scores = read_scores(tmp_path / "scores_uipress_K256.csv")
        row = rows[2]
        assert bootstrap_ci(scores, 1000, 0) == bootstrap_ci(scores, 1000, 0) == (row.ci_low, row.ci_high)
        assert paths["k_curve"].exists()


@pytest.mark.criterion(9)
class TestDataIntegrity:
    def test_round_trip_1000(self):
        for s in gen_dataset(2024, 1000):
            assert render(s.markup, (s.image.height_px, s.image.width_px)).pixels.tobytes() == s.image.pixels.tobytes()
            assert parse_lenient(linearize(s.markup)) == (s.markup, True)
