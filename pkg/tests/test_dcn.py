import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hseg import tensor_core as tc
from hseg.dcn import DcnLayer, dcn_backward, dcn_branch, dcn_forward
from hseg.gradcheck import OPS, random_offsets
from hseg.kernels import _numpy_impl
from hseg import kernels

from oracles import shifted_padded


def _weights(rng, o=3, c=2, k=3, stride=1, bias=True):
    return tc.ConvWeights(rng.standard_normal((o, c, k, k)), rng.standard_normal(o) if bias else None,
                          stride, k // 2)


def test_zero_branch_gives_zero_offsets_half_modulation(rng):
    layer = DcnLayer(4, 6, rng=rng).astype(np.float64)
    layer.branch.params["bias"][...] = 0
    x = rng.standard_normal((2, 4, 7, 5))
    off, mod, _ = dcn_branch(layer.branch.weights, x)
    assert off.shape == (2, 18, 7, 5) and mod.shape == (2, 9, 7, 5)
    assert not off.any()
    np.testing.assert_array_equal(mod, 0.5)


def test_branch_channel_count(rng):
    layer = DcnLayer(4, 6, k=5, rng=rng)
    assert layer.branch.params["weight"].shape[0] == 3 * 25


def test_modulation_saturates(rng):
    layer = DcnLayer(2, 2, rng=rng).astype(np.float64)
    layer.branch.params["bias"][18:] = 20.0
    _, mod, _ = dcn_branch(layer.branch.weights, rng.standard_normal((1, 2, 4, 4)))
    assert np.max(np.abs(mod - 1.0)) < 1e-6


def test_modulation_in_unit_interval(rng):
    layer = DcnLayer(3, 2, rng=rng).astype(np.float64)
    layer.branch.params["weight"][...] = rng.standard_normal(layer.branch.params["weight"].shape) * 10
    _, mod, _ = dcn_branch(layer.branch.weights, rng.standard_normal((1, 3, 6, 6)))
    assert mod.min() >= 0 and mod.max() <= 1


@pytest.mark.parametrize("stride", [1, 2])
def test_zero_offsets_unit_modulation_is_conv(rng, stride):
    w = _weights(rng, stride=stride)
    x = rng.standard_normal((2, 2, 7, 6))
    ref, _ = tc.conv2d(x, w)
    n, _, ho, wo = ref.shape
    out, _ = dcn_forward(w, x, np.zeros((n, 18, ho, wo)), np.ones((n, 9, ho, wo)))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_zero_modulation_gives_bias(rng):
    w = _weights(rng)
    x = rng.standard_normal((1, 2, 5, 5))
    out, cache = dcn_forward(w, x, random_offsets(rng, (1, 18, 5, 5)), np.zeros((1, 9, 5, 5)))
    np.testing.assert_allclose(out, np.broadcast_to(w.bias[None, :, None, None], out.shape), atol=1e-15)
    _, gw, _, _, _ = dcn_backward(cache, rng.standard_normal(out.shape))
    assert not gw.any()


def test_unit_column_shift_matches_shifted_conv(rng):
    w = _weights(rng)
    x = rng.standard_normal((1, 2, 6, 6))
    off = np.zeros((1, 18, 6, 6))
    off[:, 1::2] = 1.0  # dx = +1 for every tap
    out, _ = dcn_forward(w, x, off, np.ones((1, 9, 6, 6)))
    ref, _ = tc.conv2d(shifted_padded(x, 1, 0, 1), tc.ConvWeights(w.kernel, w.bias, 1, 0))
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2 ** 31))
def test_integer_offsets_match_translated_conv(dy, dx, seed):
    rng = np.random.default_rng(seed)
    w = _weights(rng, o=2, c=3)
    x = rng.standard_normal((1, 3, 5, 6))
    off = np.zeros((1, 18, 5, 6))
    off[:, 0::2] = dy
    off[:, 1::2] = dx
    out, _ = dcn_forward(w, x, off, np.ones((1, 9, 5, 6)))
    ref, _ = tc.conv2d(shifted_padded(x, 1, dy, dx), tc.ConvWeights(w.kernel, w.bias, 1, 0))
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31))
def test_output_affine_in_modulation(alpha, seed):
    rng = np.random.default_rng(seed)
    w = _weights(rng, bias=False)
    x = rng.standard_normal((1, 2, 5, 5))
    off = random_offsets(rng, (1, 18, 5, 5))
    m1, m2 = rng.random((2, 1, 9, 5, 5))
    a, _ = dcn_forward(w, x, off, alpha * m1 + (1 - alpha) * m2)
    b, _ = dcn_forward(w, x, off, m1)
    c, _ = dcn_forward(w, x, off, m2)
    np.testing.assert_allclose(a, alpha * b + (1 - alpha) * c, atol=1e-12)


def test_far_offsets_sample_zero(rng):
    w = _weights(rng)
    out, _ = dcn_forward(w, rng.standard_normal((1, 2, 4, 4)), np.full((1, 18, 4, 4), 50.0), np.ones((1, 9, 4, 4)))
    np.testing.assert_allclose(out, np.broadcast_to(w.bias[None, :, None, None], out.shape))


def test_shape_mismatch_rejected(rng):
    w = _weights(rng)
    with pytest.raises(ValueError):
        dcn_forward(w, rng.standard_normal((1, 2, 4, 4)), np.zeros((1, 18, 3, 4)), np.ones((1, 9, 4, 4)))
    with pytest.raises(ValueError):
        dcn_forward(w, rng.standard_normal((1, 5, 4, 4)), np.zeros((1, 18, 4, 4)), np.ones((1, 9, 4, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_dcn_gradcheck(seed):
    report = OPS["dcn_forward"](seed, 1e-4, np.float64)
    assert report.passed, report.errors
    assert set(report.errors) == {"x", "kernel", "bias", "offsets", "modulation"}


@pytest.mark.parametrize("seed", range(3))
def test_dcn_layer_gradcheck(seed):
    assert OPS["dcn_layer"](seed, 1e-4, np.float64).passed


def test_lattice_point_is_a_kink(rng):
    """One-sided derivatives in an offset differ at an integer offset and agree off it."""
    w = _weights(rng, o=1, c=1, bias=False)
    x = rng.standard_normal((1, 1, 5, 5))
    mod = np.ones((1, 9, 5, 5))

    def f(v):
        off = np.zeros((1, 18, 5, 5))
        off[0, 1, 2, 2] = v
        return dcn_forward(w, x, off, mod)[0][0, 0, 2, 2]

    h = 1e-3
    for v, kink in ((0.0, True), (0.25, False)):
        right = (f(v + h) - f(v)) / h
        left = (f(v) - f(v - h)) / h
        assert (abs(right - left) > 1e-6) == kink


def test_kernels_agree_with_numpy_reference(rng):
    for stride in (1, 2):
        x = rng.standard_normal((2, 3, 7, 6))
        ho = (7 + 2 - 3) // stride + 1
        wo = (6 + 2 - 3) // stride + 1
        off = random_offsets(rng, (2, 18, ho, wo)) * 1.7
        mod = rng.random((2, 9, ho, wo))
        a = kernels.deform_im2col(x, off, mod, 3, stride, 1)
        b = _numpy_impl.deform_im2col(x, off, mod, 3, stride, 1)
        np.testing.assert_allclose(a, b, atol=1e-12)
        g = rng.standard_normal(a.shape)
        for u, v in zip(kernels.deform_col2im(x, off, mod, g, 3, stride, 1),
                        _numpy_impl.deform_col2im(x, off, mod, g, 3, stride, 1)):
            np.testing.assert_allclose(u, v, atol=1e-11)


def test_layer_starts_as_half_scaled_conv(rng):
    layer = DcnLayer(2, 3, rng=rng).astype(np.float64)
    x = rng.standard_normal((1, 2, 6, 6))
    w = layer.main.weights
    ref, _ = tc.conv2d(x, tc.ConvWeights(w.kernel * 0.5, w.bias, 1, 1))
    np.testing.assert_allclose(layer.forward(x), ref, atol=1e-12)
