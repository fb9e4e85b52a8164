import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uipress import tensor as T
from uipress.tensor import Array, ShapeError

from oracles import check_grads, conv_depthwise_oracle, conv_full_oracle, pool_oracle

SEEDS = range(10)
TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Array(rng.normal(size=shape) * scale, requires_grad=True)


def weighted_sum(y: Array, rng) -> Array:
    """Contract with fixed random weights so every output element matters."""
    w = Array(np.random.default_rng(999).normal(size=y.shape))
    return T.sum_all(y * w)


# Each case: (name, builder(rng) -> (params, fn)) where fn() rebuilds the scalar.
def case_add(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    return [a, b], lambda: weighted_sum(a + b, rng)


def case_mul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 1)
    return [a, b], lambda: weighted_sum(a * b, rng)


def case_scale_neg_sub(rng):
    a, b = leaf(rng, 5), leaf(rng, 5)
    return [a, b], lambda: weighted_sum(-(a * 2.5) - b, rng)


def case_mean(rng):
    a = leaf(rng, 3, 4)
    return [a], lambda: T.mean_all(a * a)


def case_reductions(rng):
    a = leaf(rng, 3, 4, 2)
    return [a], lambda: (a * a * a).sum() + T.gelu(a).mean()


def case_gelu(rng):
    a = leaf(rng, 4, 5, scale=2.0)
    return [a], lambda: weighted_sum(T.gelu(a), rng)


def case_dropout(rng):
    a = leaf(rng, 6, 5)
    return [a], lambda: weighted_sum(T.dropout(a, 0.3, np.random.default_rng(7)), rng)


def case_masked_fill(rng):
    a = leaf(rng, 4, 4)
    mask = np.random.default_rng(3).random((4, 4)) < 0.4
    return [a], lambda: weighted_sum(T.masked_fill(a, mask, 0.5), rng)


def case_shape_ops(rng):
    a = leaf(rng, 2, 3, 4)
    return [a], lambda: weighted_sum(a.reshape((6, 4)).transpose((1, 0)), rng)


def case_getitem(rng):
    a = leaf(rng, 5, 4)
    idx = np.array([0, 2, 2, 4])
    return [a], lambda: weighted_sum(a[1:4, ::2], rng) + weighted_sum(a[idx], rng)


def case_concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 5)
    return [a, b], lambda: weighted_sum(T.concat([a, b], axis=-1), rng)


def case_matmul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
    return [a, b], lambda: weighted_sum(a @ b, rng)


def case_linear(rng):
    x, w = leaf(rng, 2, 3, 4), leaf(rng, 6, 4)
    return [x, w], lambda: weighted_sum(T.linear(x, w), rng)


def case_conv_depthwise(rng):
    x, k = leaf(rng, 3, 7, 6), leaf(rng, 3, 3, 3)
    return [x, k], lambda: weighted_sum(T.conv2d_depthwise(x, k), rng)


def case_conv_full(rng):
    x, k = leaf(rng, 2, 5, 5), leaf(rng, 3, 2, 3, 3)
    return [x, k], lambda: weighted_sum(T.conv2d_full(x, k), rng)


def case_conv_pointwise(rng):
    x, k = leaf(rng, 2, 3, 4, 4), leaf(rng, 5, 3)
    return [x, k], lambda: weighted_sum(T.conv2d_pointwise(x, k), rng)


def case_pool(rng):
    x = leaf(rng, 2, 7, 5)
    return [x], lambda: weighted_sum(T.adaptive_avg_pool2d(x, 3, 2), rng)


def case_group_norm(rng):
    x, g, b = leaf(rng, 4, 3, 3), leaf(rng, 4), leaf(rng, 4)
    return [x, g, b], lambda: weighted_sum(T.group_norm(x, 2, g, b), rng)


def case_layer_norm(rng):
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    return [x, g, b], lambda: weighted_sum(T.layer_norm(x, g, b), rng)


def case_softmax(rng):
    x = leaf(rng, 3, 5)
    return [x], lambda: weighted_sum(T.softmax(x, axis=-1), rng)


def case_scaled_masked_softmax(rng):
    x = leaf(rng, 2, 4, 4)
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
    return [x], lambda: weighted_sum(T.scaled_masked_softmax(x, 0.7, mask), rng)


def case_embedding(rng):
    table = leaf(rng, 6, 3)
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    return [table], lambda: weighted_sum(T.embedding_lookup(table, ids), rng)


def case_cross_entropy(rng):
    logits = leaf(rng, 2, 4, 5)
    targets = np.array([[1, 4, -100, 0], [3, 3, 2, -100]])
    w = np.random.default_rng(5).random((2, 4))
    return [logits], lambda: T.cross_entropy_from_logits(logits, targets, weights=w)


CASES = [v for k, v in sorted(globals().items()) if k.startswith("case_")]


class TestGradients:
    @pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
    def test_matches_central_differences(self, case):
        worst = 0.0
        for seed in SEEDS:
            params, fn = case(np.random.default_rng(seed))
            worst = max(worst, check_grads(fn, params))
        assert worst <= TOL

    def test_shared_subexpression_accumulates(self):
        a = Array(np.array([1.5, -2.0]), requires_grad=True)
        y = a * a
        T.backward(T.sum_all(y + y))
        np.testing.assert_allclose(a.grad, 4 * a.data)

    def test_intermediate_grad_is_stored(self):
        a = Array(np.ones(3), requires_grad=True)
        y = a * 3.0
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(y.grad, np.ones(3))

    def test_backward_clears_tape(self):
        a = Array(np.ones(2), requires_grad=True)
        T.backward(T.sum_all(a * 2.0))
        assert len(T.TAPE) == 0

    def test_non_scalar_loss_rejected(self):
        a = Array(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(a * 2.0)
        T.TAPE.clear()

    def test_untracked_loss_rejected(self):
        with pytest.raises(RuntimeError):
            T.backward(Array(np.array(1.0)))

    def test_no_grad_records_nothing(self):
        a = Array(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.sum_all(a * 2.0)
        assert len(T.TAPE) == 0 and y._node is None

    def test_constants_get_no_grad(self):
        a = Array(np.ones(2), requires_grad=True)
        c = Array(np.ones(2))
        T.backward(T.sum_all(a * c))
        assert c.grad is None

    def test_float32_grads_stay_float32(self):
        a = Array(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        w = np.full((2, 3), 0.5)  # float64 constant
        T.backward(T.sum_all(a * Array(w)))
        assert a.grad.dtype == np.float32


class TestOracles:
    @pytest.mark.parametrize("seed", range(5))
    def test_depthwise_conv_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        H, W = rng.integers(1, 10, size=2)
        x, k = rng.normal(size=(3, H, W)), rng.normal(size=(3, 3, 3))
        out = T.conv2d_depthwise(Array(x), Array(k)).data
        assert np.array_equal(out, conv_depthwise_oracle(x, k))

    @pytest.mark.parametrize("seed", range(3))
    def test_full_conv_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        x, k = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3))
        np.testing.assert_allclose(T.conv2d_full(Array(x), Array(k)).data, conv_full_oracle(x, k), rtol=1e-12, atol=1e-12)

    def test_pointwise_conv_is_channel_mixing(self):
        rng = np.random.default_rng(0)
        x, k = rng.normal(size=(3, 4, 5)), rng.normal(size=(2, 3))
        expect = np.einsum("oc,chw->ohw", k, x)
        np.testing.assert_allclose(T.conv2d_pointwise(Array(x), Array(k)).data, expect, rtol=1e-12)

    def test_conv_output_size(self):
        assert T.conv_out_size(16) == 8
        assert T.conv_out_size(7) == 4
        assert T.conv_out_size(1) == 1

    def test_channel_mismatch_errors(self):
        with pytest.raises(ShapeError):
            T.conv2d_depthwise(Array(np.ones((3, 4, 4))), Array(np.ones((2, 3, 3))))

    @settings(max_examples=60, deadline=None)
    @given(
        H=st.integers(1, 12),
        W=st.integers(1, 12),
        data=st.data(),
    )
    def test_pool_bit_exact(self, H, W, data):
        oh = data.draw(st.integers(1, H))
        ow = data.draw(st.integers(1, W))
        x = np.random.default_rng(H * 100 + W).normal(size=(2, H, W))
        assert np.array_equal(T.adaptive_avg_pool2d(Array(x), oh, ow).data, pool_oracle(x, oh, ow))

    def test_pool_identity_when_sizes_match(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4))
        assert np.array_equal(T.adaptive_avg_pool2d(Array(x), 4, 4).data, x)

    def test_pool_rejects_upsampling(self):
        with pytest.raises(ShapeError):
            T.adaptive_avg_pool2d(Array(np.ones((1, 3, 3))), 4, 3)


class TestOps:
    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Array(np.ones((2, 3))), Array(np.ones((4, 5))))

    def test_group_norm_requires_divisible_channels(self):
        with pytest.raises(ValueError):
            T.group_norm(Array(np.ones((6, 2, 2))), 4, Array(np.ones(6)), Array(np.zeros(6)))

    def test_group_norm_normalizes_each_group(self):
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(4, 5, 5))
        y = T.group_norm(Array(x), 2, Array(np.ones(4)), Array(np.zeros(4))).data
        for g in range(2):
            blk = y[2 * g : 2 * g + 2]
            assert abs(blk.mean()) < 1e-12
            assert abs(blk.var() - 1.0) < 1e-3

    def test_softmax_rows_sum_to_one(self):
        y = T.softmax(Array(np.random.default_rng(0).normal(size=(3, 7))), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0)

    def test_scaled_masked_softmax_equals_composition(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 5))
        mask = np.triu(np.ones((5, 5), dtype=bool), k=1)
        fused = T.scaled_masked_softmax(Array(x), 0.3, mask).data
        ref = T.softmax(T.masked_fill(Array(x) * 0.3, mask, -np.inf), axis=-1).data
        np.testing.assert_allclose(fused, ref, rtol=1e-14, atol=1e-16)

    def test_gelu_known_values(self):
        y = T.gelu(Array(np.array([0.0, 1.0, -1.0]))).data
        np.testing.assert_allclose(y, [0.0, 0.8411919906, -0.1588080094], atol=1e-9)

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_lookup(Array(np.ones((3, 2))), np.array([3]))

    def test_cross_entropy_uniform_logits(self):
        loss = T.cross_entropy_from_logits(Array(np.zeros((4, 7))), np.array([0, 1, 2, 6]))
        assert float(loss.data) == pytest.approx(np.log(7))

    def test_cross_entropy_all_ignored(self):
        with pytest.raises(ValueError):
            T.cross_entropy_from_logits(Array(np.zeros((2, 3))), np.array([-100, -100]))

    def test_dropout_inactive_without_rng(self):
        x = Array(np.ones(10))
        assert T.dropout(x, 0.5, None) is x

    def test_mac_counter_tags(self):
        a, b = Array(np.ones((2, 3))), Array(np.ones((3, 4)))
        with T.count_macs() as c:
            with T.mac_tag("x"):
                T.matmul(a, b)
            T.linear(a, Array(np.ones((5, 3))))
        assert c.counts["x"] == 2 * 3 * 4
        assert c.counts["other"] == 2 * 3 * 5
        assert c.total == 54


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=(5,)).astype(np.float32), "s": np.array(2.5)}
        T.save_arrays(tmp_path / "x.uipt", arrays, {"note": "hi"})
        back, meta = T.load_arrays(tmp_path / "x.uipt")
        assert meta == {"note": "hi"}
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and np.array_equal(back[k], v)

    def test_truncated_file_rejected(self, tmp_path):
        T.save_arrays(tmp_path / "x.uipt", {"a": np.ones(4)})
        raw = (tmp_path / "x.uipt").read_bytes()
        (tmp_path / "y.uipt").write_bytes(raw[:-3])
        with pytest.raises(ValueError):
            T.load_arrays(tmp_path / "y.uipt")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "z.uipt").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ValueError):
            T.load_arrays(tmp_path / "z.uipt")
