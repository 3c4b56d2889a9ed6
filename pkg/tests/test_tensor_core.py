import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from haformer import tensor_core as tc
from haformer.tensor_core import ConvSpec, ShapeError


def naive_conv(x, w, b, spec):
    """Direct six-loop cross-correlation in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    cin, h, wd = x.shape
    cout = w.shape[0]
    (kh, kw), (sh, sw), (dh, dw), (ph, pw) = spec.kernel, spec.stride, spec.dilation, spec.padding
    g = spec.groups
    ho, wo = spec.output_hw(h, wd)
    xp = np.zeros((cin, h + 2 * ph, wd + 2 * pw))
    xp[:, ph:ph + h, pw:pw + wd] = x
    out = np.zeros((cout, ho, wo))
    cig, cog = cin // g, cout // g
    for o in range(cout):
        grp = o // cog
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cig):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[grp * cig + c, i * sh + u * dh, j * sw + v * dw]
                out[o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def test_conv_identity_kernel():
    spec = ConvSpec(1, 1, (1, 1), has_bias=False)
    y = tc.conv2d(np.full((1, 1, 1), 5.0, tc.DTYPE), np.ones((1, 1, 1, 1), tc.DTYPE), None, spec)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 5.0


def test_conv_sum_of_ones():
    spec = ConvSpec(1, 1, (3, 3), has_bias=False)
    y = tc.conv2d(np.ones((1, 3, 3), tc.DTYPE), np.ones((1, 1, 3, 3), tc.DTYPE), None, spec)
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 9.0


def test_conv_dilated_index_oracle():
    x = np.arange(25, dtype=tc.DTYPE).reshape(1, 5, 5)
    spec = ConvSpec(1, 1, (3, 3), dilation=(2, 2), has_bias=False)
    y = tc.conv2d(x, np.ones((1, 1, 3, 3), tc.DTYPE), None, spec)
    expect = sum(float(x[0, i, j]) for i in (0, 2, 4) for j in (0, 2, 4))
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == pytest.approx(expect, abs=1e-5)


@pytest.mark.parametrize("spec,hw", [
    (ConvSpec.same(3, 4, (3, 3)), (5, 6)),
    (ConvSpec.same(4, 4, (5, 1), dilation=(2, 1), groups=4), (7, 5)),
    (ConvSpec.same(4, 6, (1, 3), groups=2, stride=(2, 2)), (6, 7)),
    (ConvSpec.same(2, 3, (1, 1)), (3, 3)),
    (ConvSpec(2, 2, (3, 3), stride=(2, 1), padding=(0, 1)), (7, 4)),
])
def test_conv_matches_naive(spec, hw, rng):
    x = rng.standard_normal((spec.in_channels,) + hw).astype(tc.DTYPE)
    w = rng.standard_normal(spec.weight_shape).astype(tc.DTYPE)
    b = rng.standard_normal(spec.out_channels).astype(tc.DTYPE) if spec.has_bias else None
    np.testing.assert_allclose(tc.conv2d(x, w, b, spec), naive_conv(x, w, b, spec), atol=1e-5)


def test_conv_depthwise_unit_is_identity(rng):
    spec = ConvSpec(5, 5, (1, 1), groups=5, has_bias=False)
    x = rng.standard_normal((5, 4, 3)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.conv2d(x, np.ones(spec.weight_shape, tc.DTYPE), None, spec), x)


def test_conv_errors_name_axis():
    spec = ConvSpec(3, 4, (3, 3), has_bias=False)
    with pytest.raises(ShapeError, match="channel"):
        tc.conv2d(np.zeros((2, 5, 5), tc.DTYPE), np.zeros(spec.weight_shape, tc.DTYPE), None, spec)
    with pytest.raises(ShapeError):
        tc.conv2d(np.zeros((3, 2, 2), tc.DTYPE), np.zeros(spec.weight_shape, tc.DTYPE), None, spec)
    with pytest.raises(ShapeError):
        ConvSpec(3, 4, (3, 3), groups=2)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_conv_linearity(alpha, beta, seed):
    r = np.random.default_rng(seed)
    spec = ConvSpec.same(3, 2, (3, 3), dilation=(2, 1), has_bias=False)
    w = r.standard_normal(spec.weight_shape).astype(tc.DTYPE)
    x1, x2 = r.standard_normal((2, 3, 6, 6)).astype(tc.DTYPE)
    lhs = tc.conv2d((alpha * x1 + beta * x2).astype(tc.DTYPE), w, None, spec)
    rhs = alpha * tc.conv2d(x1, w, None, spec) + beta * tc.conv2d(x2, w, None, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * max(1.0, np.abs(rhs).max()))


def test_conv_spec_params_and_macs():
    spec = ConvSpec.same(3, 16, (3, 3))
    assert spec.num_params == 3 * 16 * 9 + 16 == 448
    assert ConvSpec.same(8, 8, (1, 1), has_bias=False).macs(5, 7) == 8 * 8 * 35


def test_matmul_examples(rng):
    b = rng.standard_normal((2, 3)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.matmul(np.eye(2, dtype=tc.DTYPE), b), b)
    out = tc.matmul(np.array([[1, 2], [3, 4]], tc.DTYPE), np.array([[5], [6]], tc.DTYPE))
    np.testing.assert_array_equal(out, [[17], [39]])
    a = rng.standard_normal((7, 5)).astype(tc.DTYPE)
    c = rng.standard_normal((5, 3)).astype(tc.DTYPE)
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += float(a[i, k]) * float(c[k, j])
    np.testing.assert_allclose(tc.matmul(a, c), ref, atol=1e-5)
    with pytest.raises(ShapeError):
        tc.matmul(a, a)


def test_softmax_examples(rng):
    np.testing.assert_allclose(tc.softmax(np.zeros(5, tc.DTYPE)), np.full(5, 0.2), atol=1e-7)
    np.testing.assert_allclose(tc.softmax(np.array([0, math.log(3)], tc.DTYPE)), [0.25, 0.75], atol=1e-7)
    x = rng.standard_normal((4, 6)).astype(tc.DTYPE)
    e = np.exp(x.astype(np.float64))
    ref = e / e.sum(axis=1, keepdims=True)
    y = tc.softmax(x, axis=1)
    np.testing.assert_allclose(y, ref, atol=1e-6)
    np.testing.assert_allclose(y.sum(axis=1), 1, atol=1e-6)
    with pytest.raises(ShapeError):
        tc.softmax(x, axis=2)


@given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)))
def test_softmax_normalized(x):
    y = tc.softmax(x, axis=1)
    assert np.all(y >= 0) and np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(axis=1), 1, atol=1e-6)


def test_pools(rng):
    np.testing.assert_array_equal(tc.global_avg_pool_spatial(np.full((2, 3, 3), 1.5, tc.DTYPE)), np.full((2, 1, 1), 1.5))
    assert tc.global_avg_pool_spatial(np.array([[[1, 2], [3, 4]]], tc.DTYPE))[0, 0, 0] == 2.5
    x = rng.standard_normal((3, 5, 7)).astype(tc.DTYPE)
    np.testing.assert_allclose(tc.global_avg_pool_spatial(x)[:, 0, 0], x.astype(np.float64).mean(axis=(1, 2)), atol=1e-6)

    one = rng.standard_normal((1, 4, 4)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.channel_mean_map(one), one)
    two = np.stack([np.full((3, 3), 2.0), np.full((3, 3), 4.0)]).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.channel_mean_map(two), np.full((1, 3, 3), 3.0))
    x = rng.standard_normal((8, 4, 4)).astype(tc.DTYPE)
    np.testing.assert_allclose(tc.channel_mean_map(x)[0], x.astype(np.float64).mean(axis=0), atol=1e-6)


def test_channel_shuffle(rng):
    x = rng.standard_normal((6, 2, 2)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.channel_shuffle(x, 1), x)
    lab = np.arange(4, dtype=tc.DTYPE)[:, None, None]
    assert tc.channel_shuffle(lab, 2)[:, 0, 0].tolist() == [0, 2, 1, 3]
    x = rng.standard_normal((12, 3, 3)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.channel_shuffle(tc.channel_shuffle(x, 3), 4), x)
    with pytest.raises(ShapeError):
        tc.channel_shuffle(x, 5)


@given(st.sampled_from([(1, 6), (2, 6), (3, 6), (4, 8), (6, 12)]), st.integers(0, 2**31 - 1))
def test_shuffle_is_permutation(gc, seed):
    g, c = gc
    x = np.random.default_rng(seed).standard_normal((c, 2, 3)).astype(tc.DTYPE)
    y = tc.channel_shuffle(x, g)
    np.testing.assert_array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
    np.testing.assert_array_equal(tc.channel_shuffle(y, c // g), x)


def bilinear_oracle(x, out_hw):
    c, h, w = x.shape
    ho, wo = out_hw
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        sy = min(max((i + 0.5) * h / ho - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(wo):
            sx = min(max((j + 0.5) * w / wo - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * x[:, y0, x0] + (1 - fy) * fx * x[:, y0, x1]
                            + fy * (1 - fx) * x[:, y1, x0] + fy * fx * x[:, y1, x1])
    return out


def test_bilinear_examples(rng):
    y = tc.bilinear_upsample(np.full((2, 3, 3), 0.7, tc.DTYPE), (7, 10))
    np.testing.assert_allclose(y, 0.7, atol=1e-7)
    np.testing.assert_array_equal(tc.bilinear_upsample(np.full((1, 1, 1), 3.5, tc.DTYPE), (2, 2)), np.full((1, 2, 2), 3.5))
    x = np.array([[[0, 1], [2, 3]]], tc.DTYPE)
    np.testing.assert_allclose(tc.bilinear_upsample(x, (4, 4)), bilinear_oracle(x.astype(np.float64), (4, 4)), atol=1e-6)
    x = rng.standard_normal((3, 3, 5)).astype(tc.DTYPE)
    np.testing.assert_allclose(tc.bilinear_upsample(x, (8, 11)), bilinear_oracle(x.astype(np.float64), (8, 11)), atol=1e-5)
    with pytest.raises(ShapeError):
        tc.bilinear_upsample(x, (2, 5))


def test_bilinear_mean_preserved_for_integer_scale():
    yy, xx = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8), indexing="ij")
    x = np.sin(2 * yy + xx)[None].astype(tc.DTYPE)
    y = tc.bilinear_upsample(x, (32, 32))
    assert abs(float(y.mean()) - float(x.mean())) < 1e-2


def test_activations():
    assert tc.relu(np.array([-1.0, 2.0], tc.DTYPE)).tolist() == [0.0, 2.0]
    assert tc.sigmoid(np.zeros(1, tc.DTYPE))[0] == 0.5
    grid = np.array([-3, -1, 0, 1, 3], np.float64)
    ref = 0.5 * grid * (1 + np.tanh(math.sqrt(2 / math.pi) * (grid + 0.044715 * grid**3)))
    np.testing.assert_allclose(tc.gelu(grid.astype(tc.DTYPE)), ref, atol=1e-6)
    x = np.array([[[-2.0]], [[-2.0]]], tc.DTYPE)
    np.testing.assert_allclose(tc.prelu(x, np.array([0.1, 0.5], tc.DTYPE))[:, 0, 0], [-0.2, -1.0])
    with pytest.raises(ShapeError):
        tc.prelu(x, np.ones(3, tc.DTYPE))
    assert tc.activation(np.array([-1.0], tc.DTYPE), "relu")[0] == 0
    with pytest.raises(ValueError):
        tc.activation(x, "swish")


def test_elementwise(rng):
    x = rng.standard_normal((3, 4, 4)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.elementwise(x, np.zeros_like(x), "add"), x)
    m = rng.standard_normal((1, 4, 4)).astype(tc.DTYPE)
    np.testing.assert_allclose(tc.elementwise(x, m, "mul"), x * np.repeat(m, 3, axis=0))
    c = rng.standard_normal((3, 1, 1)).astype(tc.DTYPE)
    expanded = np.tile(c, (1, 4, 4))
    np.testing.assert_allclose(tc.elementwise(x, c, "mul"), x * expanded)
    with pytest.raises(ShapeError):
        tc.elementwise(x, np.zeros((2, 4, 4), tc.DTYPE), "add")


def test_layout(rng):
    x = rng.standard_normal((2, 3)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.reshape(tc.reshape(x, (3, 2)), (2, 3)), x)
    a, b = np.zeros((2, 3, 3), tc.DTYPE), np.ones((3, 3, 3), tc.DTYPE)
    assert tc.concat([a, b], 0).shape == (5, 3, 3)
    y = rng.standard_normal((5, 7)).astype(tc.DTYPE)
    np.testing.assert_array_equal(tc.transpose2d(tc.transpose2d(y)), y)
    with pytest.raises(ShapeError):
        tc.reshape(x, (4, 2))
    with pytest.raises(ShapeError):
        tc.concat([a, np.zeros((2, 4, 3), tc.DTYPE)], 0)


def test_probe_counts_conv_macs(rng):
    spec = ConvSpec.same(4, 6, (3, 1), dilation=(2, 1), groups=2)
    x = rng.standard_normal((4, 5, 6)).astype(tc.DTYPE)
    with tc.probe() as p:
        tc.conv2d(x, np.zeros(spec.weight_shape, tc.DTYPE), np.zeros(6, tc.DTYPE), spec)
    assert p.macs == spec.macs(5, 6)
