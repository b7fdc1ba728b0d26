"""Kernel contracts, checked against hand values and a direct-loop convolution."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldmquant.tensor import ConvSpec, ShapeError, combine, conv2d, group_norm, linear, resample, silu


def loop_conv2d(x, w, b, stride, padding):
    """Reference cross-correlation, one output element at a time."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[i, o, y, z] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        w[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_array_equal(conv2d(x, w, np.zeros(3), ConvSpec(3, 3, 1)), x)

    def test_zero_weight(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        out = conv2d(x, np.zeros((3, 2, 3, 3)), np.zeros(3), ConvSpec(2, 3, 3, padding=1))
        assert out.shape == (1, 3, 4, 4) and not out.any()

    def test_hand_average(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = conv2d(x, np.full((1, 1, 2, 2), 0.25), np.zeros(1), ConvSpec(1, 1, 2))
        np.testing.assert_array_equal(out, [[[[2.5]]]])

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
    def test_matches_loop_reference(self, rng, stride, padding, k):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = conv2d(x, w, b, ConvSpec(3, 4, k, stride, padding))
        np.testing.assert_allclose(out, loop_conv2d(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_dimension(self, rng):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(rng.standard_normal((1, 2, 4, 4)), np.zeros((3, 3, 3, 3)), None, ConvSpec(3, 3, 3))

    def test_output_extent_must_be_positive(self):
        with pytest.raises((ShapeError, ValueError)):
            conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), None, ConvSpec(1, 1, 3))

    def test_linearity_without_bias(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        spec = ConvSpec(2, 2, 3, padding=1)
        np.testing.assert_allclose(conv2d(3.5 * x, w, None, spec), 3.5 * conv2d(x, w, None, spec), rtol=1e-12)

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        spec = ConvSpec(3, 4, 3, padding=1)
        assert conv2d(x, w, None, spec).tobytes() == conv2d(x, w, None, spec).tobytes()


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(linear(x, np.eye(4), np.zeros(4)), x)

    def test_zero_weight_gives_bias(self):
        out = linear(np.ones((2, 3)), np.zeros((2, 3)), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(out, [[1.5, -2.0], [1.5, -2.0]])

    def test_hand_product(self):
        out = linear(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2))
        np.testing.assert_array_equal(out, [[3.0, 2.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            linear(np.ones((2, 3)), np.ones((2, 4)), None)

    def test_linearity_without_bias(self, rng):
        x, w = rng.standard_normal((4, 5)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(linear(-2.25 * x, w, None), -2.25 * linear(x, w, None), rtol=1e-12)


class TestSilu:
    def test_values(self):
        assert silu(np.array([0.0]))[0] == 0.0
        assert silu(np.array([1.0]))[0] == pytest.approx(0.7310585786300049, abs=1e-15)

    def test_asymptote(self):
        x = np.linspace(20, 60, 9)
        assert np.max(np.abs(silu(x) - x)) < 1e-6

    def test_finite_for_extremes(self):
        assert np.all(np.isfinite(silu(np.array([-1e6, -700.0, 700.0, 1e6]))))


class TestGroupNorm:
    def test_constant_input_collapses(self):
        out = group_norm(np.full((1, 4, 3, 3), 7.0), 2, np.ones(4), np.zeros(4))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_zero_gamma_gives_beta(self, rng):
        beta = np.array([1.0, -1.0])
        out = group_norm(rng.standard_normal((2, 2, 3, 3)), 1, np.zeros(2), beta)
        np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))

    def test_hand_two_values(self):
        x = np.array([[[[1.0]], [[3.0]]]])
        out = group_norm(x, 1, np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], rtol=1e-9)

    def test_per_group_moments(self, rng):
        x = rng.standard_normal((2, 6, 4, 4)) * 3 + 1
        out = group_norm(x, 3, np.ones(6), np.zeros(6)).reshape(2, 3, -1)
        np.testing.assert_allclose(out.mean(axis=2), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=2), 1.0, rtol=1e-4)

    def test_indivisible_groups(self):
        with pytest.raises(ShapeError):
            group_norm(np.zeros((1, 3, 2, 2)), 2, np.ones(3), np.zeros(3))


class TestResample:
    def test_down_hand(self):
        out = resample(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), "down_stride_2")
        np.testing.assert_array_equal(out, [[[[1.0]]]])

    def test_constant_stays_constant(self):
        out = resample(np.full((1, 2, 2, 2), 3.0), "up_nearest_2x")
        assert out.shape == (1, 2, 4, 4) and np.all(out == 3.0)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            resample(np.zeros((1, 1, 3, 4)), "down_stride_2")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            resample(np.zeros((1, 1, 2, 2)), "bilinear")

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6)))
    def test_up_then_down_is_identity(self, x):
        assert np.array_equal(resample(resample(x, "up_nearest_2x"), "down_stride_2"), x)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-100, 100)))
    def test_block_constant_round_trip(self, base):
        x = resample(base, "up_nearest_2x")
        assert np.array_equal(resample(resample(x, "down_stride_2"), "up_nearest_2x"), x)


class TestCombine:
    def test_add_zero(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        np.testing.assert_array_equal(combine(a, np.zeros_like(a), "add"), a)

    def test_add_hand(self):
        np.testing.assert_array_equal(combine(np.array([1.0, 2.0]), np.array([3.0, 4.0]), "add"), [4.0, 6.0])

    def test_concat_shape(self):
        out = combine(np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4)), "concat_channels")
        assert out.shape == (1, 5, 4, 4)
        assert not out[:, :2].any() and np.all(out[:, 2:] == 1)

    def test_add_channel_broadcasts(self, rng):
        a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3))
        np.testing.assert_array_equal(combine(a, b, "add_channel"), a + b[:, :, None, None])

    @pytest.mark.parametrize("mode,a,b", [
        ("add", (1, 2, 2, 2), (1, 3, 2, 2)),
        ("concat_channels", (1, 2, 2, 2), (1, 2, 4, 4)),
    ])
    def test_incompatible(self, mode, a, b):
        with pytest.raises(ShapeError):
            combine(np.zeros(a), np.zeros(b), mode)
