import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgenext import tensor as T
from edgenext.tensor import ConvSpec, DimensionError


def _naive_conv(x, w, b, stride, pad, groups):
    """Direct six-loop convolution used as an oracle."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    gi, go = cin // groups, cout // groups
    out = np.zeros((n, ho, wo, cout))
    for bi in range(n):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    g = co // go
                    acc = 0.0
                    for di in range(k):
                        for dj in range(k):
                            for ci in range(gi):
                                acc += xp[bi, i * stride + di, j * stride + dj, g * gi + ci] * w[di, dj, ci, co]
                    out[bi, i, j, co] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:
    def test_pointwise_scaling(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = T.conv2d(x, np.full((1, 1, 1, 1), 2.0), np.zeros(1), ConvSpec(1, 1, 1))
        np.testing.assert_array_equal(out[0, :, :, 0], [[2, 4], [6, 8]])

    def test_depthwise_ones_sums_in_bounds_neighborhood(self):
        out = T.conv2d(np.ones((1, 2, 2, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), ConvSpec.same(3, 1))
        np.testing.assert_array_equal(out[0, :, :, 0], [[4, 4], [4, 4]])

    def test_zero_weights_annihilate(self):
        spec = ConvSpec(3, 4, 6, stride=2, padding=1)
        out = T.conv2d(np.random.default_rng(0).standard_normal((2, 7, 7, 4)), np.zeros(spec.weight_shape), np.zeros(6), spec)
        assert out.shape == (2, 4, 4, 6)
        assert not out.any()

    @pytest.mark.parametrize(
        "k,cin,cout,stride,pad,groups",
        [(3, 4, 6, 1, 1, 1), (3, 4, 6, 2, 1, 2), (5, 3, 3, 1, 2, 3), (2, 3, 5, 2, 0, 1), (4, 3, 8, 4, 0, 1)],
    )
    def test_matches_naive_loops(self, k, cin, cout, stride, pad, groups):
        rng = np.random.default_rng(k * 100 + cin)
        spec = ConvSpec(k, cin, cout, stride=stride, padding=pad, groups=groups)
        x = rng.standard_normal((2, 6, 7, cin))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(cout)
        np.testing.assert_allclose(T.conv2d(x, w, b, spec), _naive_conv(x, w, b, stride, pad, groups), atol=1e-12)

    def test_asymmetric_padding(self):
        spec = ConvSpec(3, 1, 1, padding=(0, 2, 1, 0))
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        out = T.conv2d(x, np.ones((3, 3, 1, 1)), None, spec)
        xp = np.pad(x[0, :, :, 0], ((0, 2), (1, 0)))
        expect = np.array([[xp[i : i + 3, j : j + 3].sum() for j in range(3)] for i in range(4)])
        np.testing.assert_array_equal(out[0, :, :, 0], expect)

    def test_pointwise_equals_linear(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 4, 8))
        w = rng.standard_normal((8, 5))
        b = rng.standard_normal(5)
        conv = T.conv2d(x, w[None, None], b, ConvSpec(1, 8, 5))
        np.testing.assert_allclose(conv, T.linear(x, w, b), atol=1e-12)
        c32 = T.conv2d(x.astype(np.float32), w[None, None].astype(np.float32), b.astype(np.float32), ConvSpec(1, 8, 5))
        lin32 = T.linear(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
        assert np.abs(c32 - lin32).max() < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        spec = ConvSpec.same(3, 4)
        x, y = rng.standard_normal((2, 1, 5, 5, 4))
        w = rng.standard_normal(spec.weight_shape)
        lhs = T.conv2d(a * x + b * y, w, None, spec)
        rhs = a * T.conv2d(x, w, None, spec) + b * T.conv2d(y, w, None, spec)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_spec_invariants(self):
        with pytest.raises(DimensionError):
            ConvSpec(3, 4, 6, groups=4)
        assert ConvSpec.same(7, 16).depthwise
        assert ConvSpec.same(9, 16).padding == (4, 4, 4, 4)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 4, 4)), None, ConvSpec(3, 4, 4))
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((4, 4, 3)), np.zeros((1, 1, 3, 3)), None, ConvSpec(1, 3, 3))

    def test_output_size(self):
        assert T.conv_output_size(256, 4, 4, 0, 0) == 64
        assert T.conv_output_size(8, 9, 1, 4, 4) == 8


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 4))
        np.testing.assert_array_equal(T.linear(x, np.eye(4), np.zeros(4)), x)

    def test_affine_shift(self):
        out = T.linear(np.array([3.0, 4.0]).reshape(1, 1, 1, 2), np.eye(2), np.ones(2))
        np.testing.assert_array_equal(out.reshape(-1), [4, 5])


class TestNorms:
    def test_layer_norm_constant_is_zero(self):
        out = T.layer_norm(np.full((1, 2, 2, 5), 3.0), np.ones(5), np.zeros(5))
        assert not out.any()

    def test_layer_norm_hand_value(self):
        out = T.layer_norm(np.array([1.0, 3.0]).reshape(1, 1, 1, 2), np.ones(2), np.zeros(2), eps=1e-14)
        np.testing.assert_allclose(out.reshape(-1), [-1, 1], rtol=1e-12)

    def test_layer_norm_affine_dominates(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 3, 4))
        np.testing.assert_array_equal(T.layer_norm(x, np.zeros(4), np.full(4, 7.0)), 7.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**16), st.floats(1.0, 100.0), st.floats(-1e3, 1e3))
    def test_layer_norm_moments(self, seed, scale, offset):
        x = np.random.default_rng(seed).standard_normal((2, 3, 3, 6)) * scale + offset
        y = T.layer_norm(x, np.ones(6), np.zeros(6), eps=1e-12)
        assert np.abs(y.mean(-1)).max() < 1e-6
        assert np.abs(y.var(-1) - 1).max() < 1e-5

    def test_batch_norm_identity_stats(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 4))
        out = T.batch_norm(x, np.ones(4), np.zeros(4), eps=0.0, mean=np.zeros(4), var=np.ones(4))
        np.testing.assert_array_equal(out, x)

    def test_batch_norm_constant_input(self):
        out = T.batch_norm(np.full((2, 2, 2, 3), 5.0), np.ones(3), np.zeros(3), mean=np.full(3, 5.0), var=np.zeros(3))
        assert not out.any()

    def test_batch_norm_training_moments(self):
        x = np.random.default_rng(3).standard_normal((4, 5, 5, 6)) * 3 + 2
        y = T.batch_norm(x, np.ones(6), np.zeros(6))
        assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-5
        assert np.abs(y.var(axis=(0, 1, 2)) - 1).max() < 1e-4

    def test_batch_norm_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            T.batch_norm(np.zeros((1, 1, 1, 2)), np.ones(2), np.zeros(2), mean=np.zeros(2), var=np.array([1.0, -1.0]))


class TestActivations:
    def test_gelu_points(self):
        assert T.gelu(np.array(0.0)) == 0.0
        assert abs(T.gelu(np.array(10.0)) - 10.0) < 1e-6
        x = 0.7
        assert T.gelu(np.array(x)) == pytest.approx(0.5 * x * (1 + math.erf(x / math.sqrt(2))), rel=1e-15)

    def test_hard_swish_clamps(self):
        np.testing.assert_array_equal(T.hard_swish(np.array([3.0, -3.0, -5.0, 5.0])), [3.0, 0.0, 0.0, 5.0])
        assert T.hard_swish(np.array(1.0)) == pytest.approx(1.0 * 4.0 / 6.0)

    def test_activation_dispatch(self):
        with pytest.raises(ValueError):
            T.activation("relu", np.zeros(1))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(3)), [1 / 3] * 3)

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (3, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_and_shift(self, x, c):
        y = T.softmax(x, axis=-1)
        assert np.abs(y.sum(-1) - 1).max() < 1e-6
        assert np.abs(T.softmax(x + c, axis=-1) - y).max() < 1e-12


class TestL2:
    def test_values(self):
        np.testing.assert_allclose(T.l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
        u = np.array([0.6, 0.8])
        np.testing.assert_array_equal(T.l2_normalize(u), u)
        np.testing.assert_array_equal(T.l2_normalize(np.zeros(3)), np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)))
    def test_idempotent(self, x):
        once = T.l2_normalize(x, axis=0)
        assert np.abs(T.l2_normalize(once, axis=0) - once).max() < 1e-12


class TestMatmulPoolAdd:
    def test_matmul(self):
        m = np.random.default_rng(0).standard_normal((3, 3))
        np.testing.assert_array_equal(T.matmul(np.eye(3), m), m)
        np.testing.assert_array_equal(T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])), [[17], [39]])
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        assert np.abs(T.matmul(a, b).T - T.matmul(b.T, a.T)).max() < 1e-12
        with pytest.raises(DimensionError):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_global_avg_pool(self):
        assert T.global_avg_pool(np.array([[1.0, 3], [5, 7]]).reshape(1, 2, 2, 1)).tolist() == [[4.0]]
        np.testing.assert_array_equal(T.global_avg_pool(np.full((1, 3, 3, 2), 2.5)), [[2.5, 2.5]])
        v = np.arange(5.0).reshape(1, 1, 1, 5)
        np.testing.assert_array_equal(T.global_avg_pool(v), v.reshape(1, 5))

    def test_add_residual(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 1, 3, 3, 4))
        np.testing.assert_array_equal(T.add_residual(x, np.zeros_like(x)), x)
        assert not T.add_residual(x, -x).any()
        assert np.array_equal(T.add_residual(x, y), T.add_residual(y, x))
        with pytest.raises(DimensionError):
            T.add_residual(x, y[..., :2])


def test_ops_are_pure():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 6, 6, 4))
    w = rng.standard_normal((3, 3, 1, 4))
    spec = ConvSpec.same(3, 4)
    assert np.array_equal(T.conv2d(x, w, None, spec), T.conv2d(x, w, None, spec))
    assert np.array_equal(T.gelu(x), T.gelu(x))


def test_debug_mode_rejects_nonfinite(monkeypatch):
    monkeypatch.setenv("EDGENEXT_DEBUG", "1")
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        T.linear(np.array([[1e308, 1e308]]), np.full((2, 1), 10.0))


def test_l2_normalize_extreme_magnitudes():
    for scale in (1e-160, 1e-300, 1e150, 1e300):
        x = np.array([3.0, 4.0]) * scale
        np.testing.assert_allclose(T.l2_normalize(x), [0.6, 0.8], rtol=1e-15)
