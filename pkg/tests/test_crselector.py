from dataclasses import replace
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crkit import crselector as crs
from crkit.rng import RngState, gumbel_noise
from crkit.tensor import Conv1x1Params, DimensionError

from oracles import (
    attention_loop,
    bilinear_loop,
    conv_loop,
    crselector_loop,
    keymask_loop,
    relu_loop,
)


def make_params(c=4, m=2, seed=0, **kw):
    return crs.CRSelectorParams.random(c, m, RngState(seed, "test-params"), **kw)


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape).astype(np.float32)


class TestParams:
    def test_defaults(self):
        p = make_params(c=3, m=2)
        assert p.r == 2.0 and p.tau == 1.0 and p.hard_mask and p.d == 3

    @pytest.mark.parametrize("field,value", [("m", 0), ("r", -1.0), ("tau", 0.0)])
    def test_scalar_invariants(self, field, value):
        with pytest.raises(ValueError):
            replace(make_params(), **{field: value})

    def test_offset_conv_must_have_two_outputs(self):
        p = make_params(c=2)
        with pytest.raises(DimensionError):
            replace(p, offset_conv=Conv1x1Params.zeros(3, 4))

    def test_wq_must_be_square(self):
        with pytest.raises(DimensionError):
            replace(make_params(c=2), w_q=np.zeros((2, 3), np.float32))


class TestGTI:
    def test_zero_image_zero_bias(self):
        p = make_params(c=2)
        p = replace(p, gti_conv1=replace(p.gti_conv1, bias=np.zeros(2, np.float32)),
                    gti_conv2=replace(p.gti_conv2, bias=np.zeros(2, np.float32)))
        assert np.all(crs.compute_gti(np.zeros((1, 1, 4, 4), np.float32), p) == 0)

    def test_identity_passthrough(self):
        p = replace(make_params(c=2), gti_conv1=Conv1x1Params.identity(2),
                    gti_conv2=Conv1x1Params.identity(2))
        img = rand((1, 2, 4, 4), lo=0, hi=1)
        np.testing.assert_array_equal(crs.compute_gti(img, p), img)

    def test_composed_conv_oracle(self):
        p = make_params(c=3, seed=4)
        img = rand((1, 1, 4, 4), seed=5)
        expected = conv_loop(relu_loop(conv_loop(img, p.gti_conv1.weight, p.gti_conv1.bias)),
                             p.gti_conv2.weight, p.gti_conv2.bias)
        np.testing.assert_allclose(crs.compute_gti(img, p), expected, atol=1e-5)

    def test_resize_nearest(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(crs.resize_nearest(img, 2, 2)[0, 0], [[0, 2], [8, 10]])


class TestOffset:
    def test_zero_conv_gives_zero_offset(self):
        p = replace(make_params(c=2), offset_conv=Conv1x1Params.zeros(2, 4))
        off = crs.compute_offset(rand((1, 2, 4, 4)), rand((1, 2, 4, 4), 1), p)
        assert off.shape == (1, 2, 4, 4) and np.all(off == 0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), r=st.floats(0, 8), scale=st.floats(0.1, 100))
    def test_bounded_by_r(self, seed, r, scale):
        p = replace(make_params(c=2, seed=seed), r=r)
        x = rand((1, 2, 4, 4), seed, -scale, scale)
        off = crs.compute_offset(x, rand((1, 2, 4, 4), seed + 1, -scale, scale), p)
        assert np.max(np.abs(off)) <= np.float32(r)

    def test_step_by_step_oracle(self):
        p = make_params(c=1, m=2, seed=9)
        x, gti = rand((1, 1, 2, 2), 1), rand((1, 1, 2, 2), 2)
        cat = np.concatenate([x, gti], axis=1).astype(np.float64)
        expected = np.tanh(conv_loop(relu_loop(cat), p.offset_conv.weight, p.offset_conv.bias)) * p.r
        np.testing.assert_allclose(crs.compute_offset(x, gti, p), expected, atol=1e-5)


class TestWarp:
    def test_zero_offset_identity(self):
        x = rand((2, 3, 5, 4))
        out = crs.warp_bilinear(x, np.zeros((2, 2, 5, 4), np.float32))
        assert out.tobytes() == x.tobytes()

    def test_integer_shift_reads_right_neighbour(self):
        x = rand((1, 2, 4, 4), 3)
        off = np.zeros((1, 2, 4, 4), np.float32)
        off[0, 0, 1, 1] = 1.0
        out = crs.warp_bilinear(x, off)
        np.testing.assert_array_equal(out[0, :, 1, 1], x[0, :, 1, 2])

    def test_half_pixel(self):
        x = np.array([[[[2.0, 4.0]]]], np.float32)
        off = np.zeros((1, 2, 1, 2), np.float32)
        off[0, 0, 0, 0] = 0.5
        assert crs.warp_bilinear(x, off)[0, 0, 0, 0] == 3.0

    def test_border_clamp(self):
        x = rand((1, 1, 3, 3), 4)
        off = np.full((1, 2, 3, 3), -10.0, np.float32)
        out = crs.warp_bilinear(x, off)
        assert np.all(out == x[0, 0, 0, 0])

    def test_against_loop_oracle(self):
        x = rand((2, 3, 5, 6), 5)
        off = rand((2, 2, 5, 6), 6, -3, 3)
        np.testing.assert_allclose(crs.warp_bilinear(x, off), bilinear_loop(x, off), atol=1e-5)

    def test_wrong_offset_channels(self):
        with pytest.raises(DimensionError):
            crs.warp_bilinear(rand((1, 1, 2, 2)), np.zeros((1, 3, 2, 2), np.float32))


class TestKeymask:
    def setup_method(self):
        self.p = make_params(c=2, m=2, seed=11)
        self.v, self.gti = rand((1, 2, 4, 4), 1), rand((1, 2, 4, 4), 2)

    def test_soft_probabilities_sum_to_one(self):
        logits = crs.mask_logits(self.v, self.gti, self.p)
        noise = gumbel_noise(RngState(3), logits.shape)
        y, soft = crs.gumbel_softmax(logits, noise.astype(np.float32), 1.0, hard=False)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    def test_saturated_keep(self):
        p = replace(self.p, reduce_w=np.ones((1, 4), np.float32),
                    w_mask=np.tile(np.array([[1e6, 0.0]], np.float32), (4, 1)))
        v = np.ones((1, 2, 4, 4), np.float32)
        for seed in range(5):
            for hard in (True, False):
                km = crs.compute_keymask(v, v, replace(p, hard_mask=hard), RngState(seed))
                assert np.all(km == 1.0)

    @pytest.mark.parametrize("hard", [False, True])
    def test_seeded_replay_oracle(self, hard):
        p = replace(self.p, hard_mask=hard, tau=0.5)
        rng = RngState(1234)
        km = crs.compute_keymask(self.v, self.gti, p, rng)
        noise = gumbel_noise(RngState(1234), (4, 2))
        expected = keymask_loop(self.v, self.gti, p.reduce_w, p.w_mask, 2, noise, 0.5, hard)
        if hard:
            np.testing.assert_array_equal(km, expected)
        else:
            np.testing.assert_allclose(km, expected, atol=1e-6)

    def test_replay_bit_exact(self):
        a = crs.compute_keymask(self.v, self.gti, replace(self.p, hard_mask=False), RngState(5))
        b = crs.compute_keymask(self.v, self.gti, replace(self.p, hard_mask=False), RngState(5))
        assert a.tobytes() == b.tobytes()

    def test_hard_is_binary(self):
        km = crs.compute_keymask(self.v, self.gti, self.p, RngState(8))
        assert set(np.unique(km)) <= {0.0, 1.0}


class TestPartition:
    def test_all_keep(self):
        v, om = rand((1, 2, 4, 4), 1), rand((1, 2, 4, 4), 2)
        k, vc, vn = crs.partition_regions(om, v, np.ones(4, np.float32), 2)
        np.testing.assert_array_equal(vc, v)
        np.testing.assert_array_equal(k, om)
        assert np.all(vn == 0)

    def test_all_drop(self):
        v, om = rand((1, 2, 4, 4), 1), rand((1, 2, 4, 4), 2)
        k, vc, vn = crs.partition_regions(om, v, np.zeros(4, np.float32), 2)
        np.testing.assert_array_equal(vn, v)
        assert np.all(vc == 0) and np.all(k == 0)

    def test_mixed_hard_mask_oracle(self):
        v, om = rand((1, 2, 2, 4), 3), rand((1, 2, 2, 4), 4)
        k, vc, vn = crs.partition_regions(om, v, np.array([1, 0], np.float32), 2)
        np.testing.assert_array_equal(vc[..., :2], v[..., :2])
        assert np.all(vc[..., 2:] == 0)
        np.testing.assert_array_equal(vn[..., 2:], v[..., 2:])
        assert np.all(vn[..., :2] == 0)
        np.testing.assert_array_equal(k[..., :2], om[..., :2])
        assert np.all(vc * vn == 0)

    def test_soft_complement(self):
        v = rand((1, 3, 4, 4), 5)
        km = np.random.default_rng(0).uniform(0, 1, 4).astype(np.float32)
        _, vc, vn = crs.partition_regions(v, v, km, 2)
        np.testing.assert_allclose(vc + vn, v, atol=1e-6)


class TestProjection:
    def test_identity(self):
        p = replace(make_params(c=3), w_q=np.eye(3, dtype=np.float32), w_k=np.eye(3, dtype=np.float32))
        kt = rand((1, 3, 2, 2))
        q, k = crs.project_qk(kt, p)
        np.testing.assert_array_equal(q, kt)
        np.testing.assert_array_equal(k, kt)

    def test_zero(self):
        z = np.zeros((3, 3), np.float32)
        q, k = crs.project_qk(rand((1, 3, 2, 2)), replace(make_params(c=3), w_q=z, w_k=z))
        assert np.all(q == 0) and np.all(k == 0)

    def test_matrix_product_oracle(self):
        p = make_params(c=3, seed=2)
        kt = rand((1, 3, 2, 2), 7)
        q, k = crs.project_qk(kt, p)
        for i in range(2):
            for j in range(2):
                np.testing.assert_allclose(q[0, :, i, j], kt[0, :, i, j] @ p.w_q, atol=1e-6)
                np.testing.assert_allclose(k[0, :, i, j], kt[0, :, i, j] @ p.w_k, atol=1e-6)


class TestAttention:
    def test_uniform_scores_give_window_mean(self):
        vc = rand((1, 2, 4, 4), 1)
        z = np.zeros_like(vc)
        out = crs.attend(z, z, vc, 2, 2)
        for top in (0, 2):
            for left in (0, 2):
                mean = vc[0, :, top:top + 2, left:left + 2].mean(axis=(1, 2))
                for i in range(2):
                    for j in range(2):
                        np.testing.assert_allclose(out[0, :, top + i, left + j], mean, atol=1e-6)

    def test_single_pixel_window(self):
        p = make_params(c=2, m=1, seed=3)
        q, k, vc = rand((1, 2, 1, 1), 1), rand((1, 2, 1, 1), 2), rand((1, 2, 1, 1), 3)
        expected = crs.conv1x1(vc, p.out_conv)
        np.testing.assert_array_equal(crs.windowed_attention(q, k, vc, p), expected)

    def test_crafted_2x2_window(self):
        # tokens in row-major order; q = k = e_t scaled so scores are 4 * delta
        c = 4
        q = np.zeros((1, c, 2, 2), np.float32)
        for t, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            q[0, t, i, j] = 4.0
        vc = np.arange(16, dtype=np.float32).reshape(1, c, 2, 2)
        out = crs.attend(q, q, vc, 2, c)
        # scores / sqrt(4): diag 8, off-diag 0
        e = math.exp(8.0)
        a = np.full((4, 4), 1.0 / (e + 3))
        np.fill_diagonal(a, e / (e + 3))
        tokens = vc[0].reshape(c, 4).T
        expected = (a @ tokens).T.reshape(c, 2, 2)
        np.testing.assert_allclose(out[0], expected, atol=1e-5)
        loop, mats = attention_loop(q, q, vc, 2, c)
        np.testing.assert_allclose(mats[0], a, atol=1e-12)
        np.testing.assert_allclose(out, loop, atol=1e-5)

    def test_rows_sum_to_one(self):
        q, k = rand((2, 3, 6, 6), 1, -5, 5), rand((2, 3, 6, 6), 2, -5, 5)
        a = crs.attention_weights(q, k, 3, 3)
        assert a.shape == (2 * 4, 9, 9)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_locality(self):
        q, k, vc = rand((1, 2, 4, 4), 1), rand((1, 2, 4, 4), 2), rand((1, 2, 4, 4), 3)
        base = crs.attend(q, k, vc, 2, 2)
        vc2 = vc.copy()
        vc2[:, :, :2, :2] += 10
        out = crs.attend(q, k, vc2, 2, 2)
        mask = np.ones((4, 4), bool)
        mask[:2, :2] = False
        np.testing.assert_array_equal(out[..., mask], base[..., mask])
        assert not np.allclose(out[..., :2, :2], base[..., :2, :2])


class TestForward:
    def test_zero_out_conv_residual_identity(self):
        p = make_params(c=4, seed=2, zero_out=True)
        x = rand((1, 4, 4, 4), 1)
        out = crs.crselector_forward(x, rand((1, 1, 8, 8), 2, 0, 1), p, RngState(0))
        assert out.tobytes() == x.tobytes()

    def test_all_drop_mask_gives_identity_with_zero_bias(self):
        p = make_params(c=4, seed=2)
        p = replace(p, out_conv=replace(p.out_conv, bias=np.zeros(4, np.float32)))
        x = rand((1, 4, 4, 4), 1)
        out = crs.crselector_forward(x, rand((1, 1, 8, 8), 2, 0, 1), p, RngState(0),
                                     keymask=np.zeros(4))
        assert out.tobytes() == x.tobytes()

    def test_shape_preserved(self):
        p = make_params(c=3, m=3, seed=1)
        x = rand((2, 3, 6, 9), 1)
        out = crs.crselector_forward(x, rand((2, 1, 12, 18), 2, 0, 1), p, RngState(1))
        assert out.shape == x.shape and out.dtype == np.float32

    @pytest.mark.parametrize("hard", [False, True])
    def test_staged_oracle_end_to_end(self, hard):
        p = make_params(c=4, m=2, seed=21, hard_mask=hard)
        x = rand((1, 4, 4, 4), 31)
        image = rand((1, 1, 8, 8), 32, 0, 1)
        rng = RngState(77)
        out, g = crs.crselector_forward(x, image, p, rng, return_guidance=True)
        noise = gumbel_noise(RngState(77), (4, 2))
        expected, km = crselector_loop(x, image, p, noise)
        np.testing.assert_allclose(g.keymask, km, atol=1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-4)

    def test_deterministic(self):
        p = make_params(c=4, seed=5)
        x, img = rand((1, 4, 4, 4)), rand((1, 1, 4, 4), 1, 0, 1)
        a = crs.crselector_forward(x, img, p, RngState(9))
        b = crs.crselector_forward(x, img, p, RngState(9))
        assert a.tobytes() == b.tobytes()

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            crs.crselector_forward(rand((1, 3, 4, 4)), rand((1, 1, 4, 4)), make_params(c=4), RngState(0))

    def test_guidance_offset_bound(self):
        p = make_params(c=4, seed=5, r=1.5)
        _, g = crs.crselector_forward(rand((1, 4, 4, 4), 0, -50, 50), rand((1, 1, 4, 4), 1), p,
                                      RngState(0), return_guidance=True)
        assert np.max(np.abs(g.offset)) <= np.float32(1.5)
        assert g.offset_map.shape == (1, 4, 4, 4)
