import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uipress import tensor as T
from uipress.encoder import (
    PageImage,
    VisualTokens,
    encode_pixels,
    init_frozen_encoder,
    patch_encode,
    resolution_scale,
)


@pytest.fixture
def enc():
    return init_frozen_encoder(0, 4, 16, (16, 16))


def page(rng, h=32, w=32):
    return PageImage(rng.uniform(size=(h, w, 3)))


class TestPatchEncode:
    def test_grid_dims(self, enc):
        v = patch_encode(page(np.random.default_rng(0)), enc)
        assert (v.grid_h, v.grid_w, v.n) == (8, 8, 64)
        assert v.tokens.shape == (64, 16)

    def test_zero_image_gives_positions(self, enc):
        v = patch_encode(PageImage(np.zeros((32, 32, 3))), enc)
        np.testing.assert_array_equal(v.tokens.data, enc.pos.data[:8, :8].reshape(64, 16))

    def test_deterministic(self, enc):
        img = page(np.random.default_rng(1))
        a, b = patch_encode(img, enc), patch_encode(img, enc)
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)

    def test_patch_order_row_major(self, enc):
        # a single lit patch at grid (1, 2) changes only token 1*8+2
        px = np.zeros((32, 32, 3))
        px[4:8, 8:12] = 1.0
        v = patch_encode(PageImage(px), enc)
        base = enc.pos.data[:8, :8].reshape(64, 16)
        changed = np.flatnonzero(np.any(v.tokens.data != base, axis=1))
        assert changed.tolist() == [10]

    def test_patch_flattening_matches_loop(self, enc):
        img = page(np.random.default_rng(2), 8, 12)
        v = patch_encode(img, enc)
        p = 4
        for n in range(v.n):
            r, c = divmod(n, v.grid_w)
            flat = img.pixels[r * p : (r + 1) * p, c * p : (c + 1) * p].reshape(-1)
            want = flat @ enc.proj.data + enc.pos.data[r, c]
            np.testing.assert_allclose(v.tokens.data[n], want, rtol=1e-12)

    def test_indivisible_size_rejected(self, enc):
        with pytest.raises(ValueError, match="not divisible"):
            patch_encode(PageImage(np.zeros((30, 32, 3))), enc)

    def test_grid_larger_than_encoder(self, enc):
        with pytest.raises(ValueError, match="exceeds encoder max grid"):
            patch_encode(PageImage(np.zeros((128, 32, 3))), enc)

    def test_batched_matches_single(self, enc):
        rng = np.random.default_rng(3)
        px = rng.uniform(size=(3, 16, 24, 3))
        batched = encode_pixels(px, enc)
        for i in range(3):
            single = encode_pixels(px[i], enc)
            np.testing.assert_allclose(batched.tokens.data[i], single.tokens.data, rtol=1e-12)

    def test_bad_image_shape(self):
        with pytest.raises(ValueError):
            PageImage(np.zeros((8, 8)))

    def test_visual_tokens_grid_mismatch(self):
        with pytest.raises(ValueError, match="token count"):
            VisualTokens(T.Array(np.zeros((5, 4))), 2, 2)


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_frozen_encoder(5, 4, 8, (4, 4)), init_frozen_encoder(5, 4, 8, (4, 4))
        np.testing.assert_array_equal(a.proj.data, b.proj.data)
        np.testing.assert_array_equal(a.pos.data, b.pos.data)

    def test_distinct_seeds_differ(self):
        a, b = init_frozen_encoder(5, 4, 8, (4, 4)), init_frozen_encoder(6, 4, 8, (4, 4))
        assert np.any(a.proj.data != b.proj.data)

    def test_not_trainable(self, enc):
        assert not enc.proj.requires_grad and not enc.pos.requires_grad

    def test_projection_scale(self):
        e = init_frozen_encoder(0, 4, 512, (2, 2))
        assert e.proj.shape == (48, 512)
        assert abs(e.proj.data.std() - 1 / np.sqrt(48)) < 0.01

    def test_no_gradient_reaches_encoder(self, enc):
        img = page(np.random.default_rng(4))
        w = T.Array(np.ones(16), requires_grad=True)
        loss = T.sum_all(patch_encode(img, enc).tokens * w)
        T.backward(loss)
        assert enc.proj.grad is None or not np.any(enc.proj.grad)
        assert np.any(w.grad)


class TestResolutionScale:
    def test_identity(self):
        img = page(np.random.default_rng(0))
        np.testing.assert_array_equal(resolution_scale(img, 1).pixels, img.pixels)

    def test_token_count_drops(self, enc):
        img = page(np.random.default_rng(0))
        small = resolution_scale(img, 2)
        assert (small.height_px, small.width_px) == (16, 16)
        assert patch_encode(small, enc).n == 16

    def test_constant_preserved(self):
        img = PageImage(np.full((32, 32, 3), 0.375))
        np.testing.assert_array_equal(resolution_scale(img, 4).pixels, np.full((8, 8, 3), 0.375))

    def test_block_mean(self):
        px = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3) / 100
        out = resolution_scale(PageImage(px), 2).pixels
        np.testing.assert_allclose(out[0, 1], px[0:2, 2:4].mean(axis=(0, 1)))

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            resolution_scale(page(np.random.default_rng(0)), 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 4))
    def test_count_shrinks_by_factor_squared(self, gh, f, gw):
        enc = init_frozen_encoder(0, 2, 4, (32, 32))
        img = PageImage(np.random.default_rng(gh * 10 + gw).uniform(size=(gh * 2 * f, gw * 2 * f, 3)))
        full = patch_encode(img, enc).n
        assert patch_encode(resolution_scale(img, f), enc).n == full // (f * f)
