"""Layer wrappers: semantics the kernels alone don't pin down.

Gradient correctness lives in the finite-difference suites; these tests
cover shapes, invariants, and the behaviors with exact definitions
(inverted dropout scaling, pad/crop inverses, transposed conv as the
conv adjoint, sigmoid/relu pointwise values).
"""

import numpy as np
import pytest

from lanedetect import layers
from lanedetect.errors import DomainError, ShapeError
from lanedetect.tensor import Tensor


def _t(arr, dtype=np.float32):
    return Tensor(np.asarray(arr, dtype))


def _conv_params(rng, cout, cin, k, stride=1, padding=0, dtype=np.float32):
    w = rng.uniform(-0.5, 0.5, (cout, cin, k, k)).astype(dtype)
    b = rng.uniform(-0.5, 0.5, cout).astype(dtype)
    return layers.ConvParams(Tensor(w), b, stride, padding)


def test_conv_shapes_follow_formula():
    rng = np.random.default_rng(0)
    x = _t(rng.uniform(-1, 1, (2, 3, 9, 11)))
    p = _conv_params(rng, 5, 3, 3, stride=2, padding=1)
    y = layers.conv2d_forward(x, p)
    assert y.data.shape == (2, 5, 5, 6)   # (9+2-3)//2+1, (11+2-3)//2+1


def test_conv_rejects_geometry_mismatches():
    rng = np.random.default_rng(1)
    x = _t(rng.uniform(-1, 1, (1, 3, 6, 6)))
    with pytest.raises(ShapeError):
        layers.conv2d_forward(x, _conv_params(rng, 4, 2, 3))   # channel mismatch
    with pytest.raises(ShapeError):
        layers.conv2d_forward(_t(rng.uniform(-1, 1, (1, 3, 2, 2))),
                              _conv_params(rng, 4, 3, 3))      # kernel larger than input


def test_transposed_conv_is_the_adjoint_of_conv():
    # <conv(x), y> == <x, convT(y)> with the SAME weight tensor
    rng = np.random.default_rng(2)
    x = _t(rng.uniform(-1, 1, (2, 3, 9, 11)), np.float64)
    w = rng.uniform(-1, 1, (5, 3, 3, 3))
    zero5, zero3 = np.zeros(5), np.zeros(3)
    fwd = layers.conv2d_forward(x, layers.ConvParams(Tensor(w), zero5, 2, 1))
    y = _t(rng.uniform(-1, 1, fwd.data.shape), np.float64)
    # deconv weights live in their own (out_ch, in_ch) orientation, so the
    # shared kernel is the conv weight with the channel axes swapped
    back = layers.convtranspose2d_forward(
        y, layers.ConvParams(Tensor(w.transpose(1, 0, 2, 3)), zero3, 2, 1))
    lhs = float(np.sum(fwd.data * y.data))
    rhs = float(np.sum(x.data * back.data))
    assert abs(lhs - rhs) / abs(lhs) < 1e-12
    assert back.data.shape == x.data.shape


def test_transposed_conv_upsamples_2x():
    rng = np.random.default_rng(3)
    x = _t(rng.uniform(-1, 1, (1, 4, 5, 7)))
    p = _conv_params(rng, 2, 4, 2, stride=2, padding=0)
    y = layers.convtranspose2d_forward(x, p)
    assert y.data.shape == (1, 2, 10, 14)   # (h-1)*2 - 0 + 2


def test_maxpool_requires_even_dims():
    x = _t(np.zeros((1, 1, 5, 4)))
    with pytest.raises(ShapeError):
        layers.maxpool2x2_forward(x)


def test_maxpool_roundtrip_scatter():
    rng = np.random.default_rng(4)
    x = _t(rng.permutation(2 * 3 * 4 * 6).reshape(2, 3, 4, 6).astype(np.float32))
    y, codes = layers.maxpool2x2_forward(x)
    d = _t(rng.uniform(-1, 1, y.data.shape))
    dx = layers.maxpool2x2_backward(codes, d)
    assert dx.data.shape == x.data.shape
    # every gradient entry lands exactly on its window's argmax
    assert np.count_nonzero(dx.data) == d.data.size
    assert np.allclose(np.abs(dx.data).max(), np.abs(d.data).max())


def test_dropout_eval_and_rate_zero_are_identity():
    rng_data = np.random.default_rng(5)
    x = _t(rng_data.uniform(-1, 1, (2, 3, 4, 4)))
    y, keep = layers.dropout(x, 0.2, None, training=False)
    assert y is x and keep is None
    y0, keep0 = layers.dropout(x, 0.0, np.random.default_rng(0), training=True)
    assert np.array_equal(y0.data, x.data) and keep0 is None


def test_dropout_inverted_scaling_and_determinism():
    x = _t(np.ones((1, 1, 20, 50)))
    y1, keep1 = layers.dropout(x, 0.25, np.random.default_rng(7), training=True)
    y2, keep2 = layers.dropout(x, 0.25, np.random.default_rng(7), training=True)
    assert np.array_equal(y1.data, y2.data)
    assert np.array_equal(keep1, keep2)
    # kept entries are scaled by 1/(1-rate), dropped are zero
    kept = y1.data[keep1]
    assert np.allclose(kept, 1.0 / 0.75)
    assert not y1.data[~keep1].any()
    # keep fraction is plausible for 1000 samples at rate 0.25
    assert 0.6 < keep1.mean() < 0.9


def test_dropout_validates_rate_and_rng():
    x = _t(np.ones((1, 1, 2, 2)))
    with pytest.raises(DomainError):
        layers.dropout(x, 1.0, np.random.default_rng(0), training=True)
    with pytest.raises(DomainError):
        layers.dropout(x, -0.1, np.random.default_rng(0), training=True)
    with pytest.raises(DomainError):
        layers.dropout(x, 0.5, None, training=True)


def test_dropout_backward_masks_and_scales():
    x = _t(np.ones((1, 1, 8, 8)))
    y, keep = layers.dropout(x, 0.5, np.random.default_rng(11), training=True)
    d = _t(np.full((1, 1, 8, 8), 3.0))
    dx = layers.dropout_backward(d, keep, 0.5)
    assert np.array_equal(dx.data != 0, keep)
    assert np.allclose(dx.data[keep], 6.0)
    assert layers.dropout_backward(d, None, 0.0) is d


def test_pad_then_crop_is_identity():
    rng = np.random.default_rng(6)
    x = _t(rng.uniform(-1, 1, (2, 3, 5, 4)))
    padded = layers.zeropad_rows(x, 1, 2)
    assert padded.data.shape == (2, 3, 8, 4)
    assert not padded.data[:, :, 0].any() and not padded.data[:, :, -2:].any()
    assert np.array_equal(padded.data[:, :, 1:6], x.data)
    back = layers.crop_rows(padded, 1, 2)
    assert np.array_equal(back.data, x.data)


def test_pad_crop_zero_is_same_object():
    x = _t(np.ones((1, 1, 2, 2)))
    assert layers.zeropad_rows(x, 0, 0) is x
    assert layers.crop_rows(x, 0, 0) is x


def test_crop_to_nothing_rejected():
    x = _t(np.ones((1, 1, 3, 2)))
    with pytest.raises(ShapeError):
        layers.crop_rows(x, 2, 1)


def test_relu_and_sigmoid_pointwise_values():
    x = _t([[[[-2.0, -0.5], [0.0, 3.0]]]])
    r = layers.relu_forward(x)
    assert np.array_equal(r.data, [[[[0, 0], [0, 3]]]])
    s = layers.sigmoid_forward(x)
    want = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    assert np.allclose(s.data, want, atol=1e-7)
    assert s.data.dtype == np.float32


def test_sigmoid_saturates_without_overflow():
    x = _t([[[[-500.0, 500.0], [-30.0, 30.0]]]])
    s = layers.sigmoid_forward(x)
    assert np.all(np.isfinite(s.data))
    assert s.data[0, 0, 0, 0] == 0.0 and s.data[0, 0, 0, 1] == 1.0


def test_relu_backward_uses_input_sign():
    x = _t([[[[-1.0, 2.0], [0.0, 5.0]]]])
    d = _t([[[[10.0, 10.0], [10.0, 10.0]]]])
    dx = layers.relu_backward(x, d)
    assert np.array_equal(dx.data, [[[[0, 10], [0, 10]]]])


def test_sigmoid_backward_matches_derivative():
    y = _t([[[[0.2, 0.5], [0.9, 0.01]]]])
    d = _t([[[[1.0, 2.0], [3.0, 4.0]]]])
    dx = layers.sigmoid_backward(y, d)
    want = d.data * y.data * (1 - y.data)
    assert np.allclose(dx.data, want)


def test_sigmoid_flushes_subnormal_outputs_to_zero():
    # exp(-100) ~ 3.7e-44 is subnormal in f32; keep it out of downstream math
    x = _t([[[[-100.0, 0.0]]]])
    s = layers.sigmoid_forward(x)
    assert s.data[0, 0, 0, 0] == 0.0
    assert s.data[0, 0, 0, 1] == 0.5
    y = _t([[[[1e-41, 0.5]]]])
    dx = layers.sigmoid_backward(y, _t([[[[1.0, 1.0]]]]))
    assert dx.data[0, 0, 0, 0] == 0.0
    assert np.isclose(dx.data[0, 0, 0, 1], 0.25)


def test_flush_negligible_drops_absorbed_entries_only():
    d = _t([[[[1.0, 1e-30], [-2e-3, 0.0]]]])
    out = layers.flush_negligible(d)
    # 1e-30 is ~23 orders under the max: gone; 2e-3 easily survives
    want = d.data.copy()
    want[0, 0, 0, 1] = 0.0
    assert np.array_equal(out.data, want)
    assert out.data.dtype == np.float32


def test_flush_negligible_keeps_all_small_tensors():
    d = _t([[[[1e-30, -3e-31], [2e-30, 0.0]]]])
    out = layers.flush_negligible(d)
    assert np.array_equal(out.data, d.data)
    zeros = _t(np.zeros((1, 1, 2, 2)))
    assert layers.flush_negligible(zeros) is zeros


def test_flush_negligible_threshold_scales_with_dtype():
    d = _t([[[[1.0, 1e-17, 1e-15]]]], np.float64)
    out = layers.flush_negligible(d)
    # f64 cut is max * eps/2 ~ 1.1e-16
    assert out.data[0, 0, 0, 1] == 0.0 and out.data[0, 0, 0, 2] == 1e-15
