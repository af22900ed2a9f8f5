import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ionlab.nn_core import (
    ConvParams,
    ShapeError,
    as_feature_map,
    bilinear_deconv_params,
    bilinear_kernel,
    conv2d_backward,
    conv2d_forward,
    cross_entropy_loss,
    deconv_upsample_backward,
    deconv_upsample_forward,
    dropout_backward,
    dropout_forward,
    finite_diff_grad,
    global_average_pool_unpool,
    load_params,
    relative_error,
    relu_backward,
    relu_forward,
    save_params,
    softmax_cross_entropy,
    softmax_forward,
    xavier_init,
)


def naive_conv(x, w, b, stride, pad):
    """Direct loop over (out channel, out row, out col, in channel, ky, kx)."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[oc, ic, u, v] * xp[ic, i * stride + u, j * stride + v]
                out[oc, i, j] = acc
    return out


def naive_transposed_conv(x, w, b, stride):
    """Scatter each input cell times its kernel into the full output."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((o, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ic in range(c):
        for i in range(h):
            for j in range(wd):
                for oc in range(o):
                    out[oc, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[ic, i, j] * w[oc, ic]
    return out + b[:, None, None]


# ------------------------------------------------------------------- conv


def test_feature_map_shape_checked():
    assert as_feature_map(range(12), 3, 2, 2).shape == (3, 2, 2)
    with pytest.raises(ShapeError):
        as_feature_map(range(11), 3, 2, 2)


def test_conv_params_validate():
    with pytest.raises(ShapeError):
        ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(2), stride=0)


def test_identity_1x1_conv(rng):
    x = rng.normal(size=(4, 5, 6))
    p = ConvParams(np.eye(4)[:, :, None, None], np.zeros(4))
    np.testing.assert_array_equal(conv2d_forward(x, p), x)
    gx, _, _ = conv2d_backward(x, p, x)
    np.testing.assert_array_equal(gx, x)


def test_zero_input_gives_bias():
    p = ConvParams(np.ones((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), pad=1)
    out = conv2d_forward(np.zeros((2, 4, 4)), p)
    for c in range(3):
        assert np.all(out[c] == p.bias[c])


def test_conv_matches_naive_oracle(rng):
    x = rng.normal(size=(2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), pad=1)
    np.testing.assert_allclose(conv2d_forward(x, p), naive_conv(x, p.weights, p.bias, 1, 1), atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.sampled_from([1, 3]), st.integers(0, 10**6))
def test_conv_matches_naive_oracle_strided(c_in, c_out, pad, k, seed):
    rng = np.random.default_rng(seed)
    stride = 2
    size = 2 * rng.integers(2, 5) + k - 2 * pad
    size += (size + 2 * pad - k) % stride
    if size < 1 or size + 2 * pad < k:
        return
    x = rng.normal(size=(c_in, size, size))
    p = ConvParams(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out), stride, pad)
    np.testing.assert_allclose(conv2d_forward(x, p), naive_conv(x, p.weights, p.bias, stride, pad), atol=1e-12)


def test_conv_1x1_is_pixelwise_matmul(rng):
    x = rng.normal(size=(5, 4, 3))
    w = rng.normal(size=(2, 5))
    out = conv2d_forward(x, ConvParams(w[:, :, None, None], np.zeros(2)))
    np.testing.assert_allclose(out, np.einsum("oc,chw->ohw", w, x), atol=1e-12)


def test_conv_shape_errors(rng):
    p = ConvParams(rng.normal(size=(2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match="channels"):
        conv2d_forward(rng.normal(size=(2, 5, 5)), p)
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(3, 6, 6)), ConvParams(p.weights, p.bias, stride=2))
    with pytest.raises(ShapeError):
        conv2d_backward(rng.normal(size=(3, 5, 5)), p, np.zeros((2, 4, 4)))


def test_conv_backward_zero_grad(rng):
    x = rng.normal(size=(2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), pad=1)
    gx, gw, gb = conv2d_backward(x, p, np.zeros((3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_finite_difference(rng):
    x = rng.normal(size=(2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride=2, pad=1)
    r = rng.normal(size=(3, 3, 3))
    gx, gw, gb = conv2d_backward(x, p, r)
    f = lambda _: float(np.sum(conv2d_forward(x, p) * r))  # noqa: E731
    assert relative_error(gx, finite_diff_grad(f, x)) < 1e-6
    assert relative_error(gw, finite_diff_grad(f, p.weights)) < 1e-6
    assert relative_error(gb, finite_diff_grad(f, p.bias)) < 1e-6


def test_forward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(3, 8, 8))
    p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), pad=1)
    assert conv2d_forward(x, p).tobytes() == conv2d_forward(x.copy(), p).tobytes()


# ----------------------------------------------------------------- deconv


def test_bilinear_kernel_symmetric_and_peaked():
    k = bilinear_kernel(4)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_allclose(k, k[::-1, ::-1])
    np.testing.assert_allclose(k[0], np.outer([0.25, 0.75, 0.75, 0.25], [0.25, 0.75, 0.75, 0.25])[0])


def test_deconv_constant_input_constant_interior():
    p = bilinear_deconv_params(2, factor=4)
    out = deconv_upsample_forward(np.full((2, 5, 5), 3.0), p)
    assert out.shape == (2, 20, 20)
    np.testing.assert_allclose(out[:, 4:-4, 4:-4], 3.0, atol=1e-12)


def test_deconv_single_cell_tent_symmetric():
    p = bilinear_deconv_params(1, factor=2)
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = deconv_upsample_forward(x, p)[0]
    np.testing.assert_allclose(out, out[::-1, ::-1], atol=1e-15)
    np.testing.assert_allclose(out, out.T, atol=1e-15)
    assert np.count_nonzero(out) == 16


def test_deconv_16x_default_geometry():
    p = bilinear_deconv_params(3)
    assert p.weights.shape == (3, 3, 32, 32) and p.stride == 16
    assert deconv_upsample_forward(np.ones((3, 2, 3)), p).shape == (3, 32, 48)


def test_deconv_matches_naive_oracle(rng):
    x = rng.normal(size=(2, 3, 4))
    p = ConvParams(rng.normal(size=(3, 2, 4, 4)), rng.normal(size=3), stride=2)
    full = naive_transposed_conv(x, p.weights, p.bias, 2)
    out = deconv_upsample_forward(x, p, target=full.shape[1:])
    np.testing.assert_allclose(out, full, atol=1e-12)


def test_deconv_center_crop_offset(rng):
    x = rng.normal(size=(1, 3, 3))
    p = ConvParams(rng.normal(size=(1, 1, 4, 4)), np.zeros(1), stride=2)
    full = deconv_upsample_forward(x, p, target=(8, 8))
    np.testing.assert_array_equal(deconv_upsample_forward(x, p), full[:, 1:7, 1:7])


def test_deconv_bad_target_rejected(rng):
    p = bilinear_deconv_params(1, factor=2)
    with pytest.raises(ShapeError):
        deconv_upsample_forward(np.ones((1, 2, 2)), p, target=(0, 4))
    with pytest.raises(ShapeError):
        deconv_upsample_forward(np.ones((1, 2, 2)), p, target=(9, 4))


def test_deconv_backward_finite_difference(rng):
    x = rng.normal(size=(2, 3, 3))
    p = ConvParams(rng.normal(size=(2, 2, 4, 4)), rng.normal(size=2), stride=2)
    r = rng.normal(size=(2, 6, 6))
    gx, gw, gb = deconv_upsample_backward(x, p, r)
    f = lambda _: float(np.sum(deconv_upsample_forward(x, p) * r))  # noqa: E731
    for a, arr in ((gx, x), (gw, p.weights), (gb, p.bias)):
        assert relative_error(a, finite_diff_grad(f, arr)) < 1e-6


# -------------------------------------------------------- pointwise/losses


def test_relu_examples():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_softmax_uniform_and_ce_ln2():
    np.testing.assert_allclose(softmax_forward(np.zeros(4)), 0.25)
    assert cross_entropy_loss(softmax_forward(np.zeros(2)), 0) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy_loss(np.array([0.5, 0.5]), 2)
    with pytest.raises(ValueError):
        softmax_forward(np.array([0.0, np.inf]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    p = softmax_forward(np.array(vals))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)


def test_softmax_ce_extreme_logits_finite():
    loss, grad, _ = softmax_cross_entropy(np.array([[800.0, -800.0]]), np.array([1]))
    assert loss == pytest.approx(1600.0)
    assert np.all(np.isfinite(grad))


def test_softmax_ce_weights_and_ignore(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, 1, 2, 1])
    loss_all, _, _ = softmax_cross_entropy(logits[:2], labels[:2])
    loss_w, g, _ = softmax_cross_entropy(logits, labels, np.array([1.0, 1.0, 0.0, 0.0]))
    assert loss_w == pytest.approx(loss_all, abs=1e-14)
    assert not g[2:].any()
    assert softmax_cross_entropy(logits, labels, np.zeros(4))[0] == 0.0


def test_dropout_inverted_scaling(rng):
    x = np.ones((200, 200))
    out, mask = dropout_forward(x, 0.25, True, rng)
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02
    np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), out)
    same, none = dropout_forward(x, 0.25, False, None)
    assert same is x and none is None
    with pytest.raises(ValueError):
        dropout_forward(x, 0.5, True, None)


def test_global_average_examples(rng):
    np.testing.assert_array_equal(global_average_pool_unpool(np.full((1, 3, 3), 7.0)), 7.0)
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(global_average_pool_unpool(x), 2.5)
    y = global_average_pool_unpool(rng.normal(size=(3, 4, 5)))
    assert np.all(np.ptp(y, axis=(1, 2)) == 0)


# ------------------------------------------------------------ initializers


def test_xavier_bound_and_determinism():
    a = xavier_init((3, 3), np.random.default_rng(7))
    assert np.all(np.abs(a) <= 1.0)
    np.testing.assert_array_equal(a, xavier_init((3, 3), np.random.default_rng(7)))
    with pytest.raises(ValueError):
        xavier_init((0, 3), np.random.default_rng(0))


def test_xavier_mean_near_zero():
    a = xavier_init((100, 1000), np.random.default_rng(0))
    assert abs(a.mean()) < 0.01


def test_xavier_conv_fans():
    a = xavier_init((4, 2, 3, 3), np.random.default_rng(0))
    assert np.abs(a).max() <= math.sqrt(6 / (18 + 36))


# ------------------------------------------------------ finite differences


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v.sum()), np.zeros(5)), 1.0, atol=1e-9)
    np.testing.assert_allclose(finite_diff_grad(lambda v: float(v @ v), np.array([1.0, 2.0])), [2, 4], atol=1e-8)
    np.testing.assert_allclose(finite_diff_grad(lambda v: 3.0, np.ones(4)), 0.0, atol=1e-9)


def test_finite_diff_probe_subset_and_restore(rng):
    x = rng.normal(size=20_000)
    before = x.copy()
    g = finite_diff_grad(lambda v: float(v.sum()), x, num_probes=200, max_full=10_000)
    assert np.count_nonzero(~np.isnan(g)) == 200
    np.testing.assert_array_equal(x, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float(np.log(v[0])), np.array([0.0]))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.ones(2), epsilon=0)


def test_relative_error_ignores_unprobed():
    assert relative_error(np.array([1.0, 5.0]), np.array([1.0, np.nan])) == 0.0
    assert relative_error(np.array([1.0]), np.array([3.0])) == pytest.approx(0.5)


# ----------------------------------------------------------- checkpoints


def test_params_round_trip_and_bytes_deterministic(tmp_path, rng):
    params = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4), "s": np.array(2.5)}
    save_params(tmp_path / "x.bin", params, {"note": "t"})
    save_params(tmp_path / "y.bin", dict(reversed(list(params.items()))), {"note": "t"})
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()
    back, meta = load_params(tmp_path / "x.bin")
    assert meta == {"note": "t"}
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_params_bad_files(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOPE 1\n{}\n")
    with pytest.raises(ValueError, match="not a parameter file"):
        load_params(tmp_path / "bad.bin")
    save_params(tmp_path / "ok.bin", {"a": np.ones(3)})
    data = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "trunc.bin")
