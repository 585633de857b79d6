import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volres import kernels as K
from volres import tensor as T
from volres.errors import DegenerateBatchError, DimensionError, DTypeError, LabelError


def loop_conv(x, w, stride, pad):
    """Six nested loops over the output, accumulating taps in (ci, kd, kh, kw) order."""
    n, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = ((s + 2 * pad - k) // stride + 1 for s, k in ((d, kd), (h, kh), (wd, kw)))
    y = np.zeros((n, co, od, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(od):
                for j in range(oh):
                    for k in range(ow):
                        acc = x.dtype.type(0)
                        for c in range(ci):
                            for a in range(kd):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        acc = acc + xp[b, c, i * stride + a, j * stride + bb, k * stride + cc] * w[o, c, a, bb, cc]
                        y[b, o, i, j, k] = acc
    return y


def random_case(rng, dtype=np.float64):
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    dims = rng.integers(k, k + 4, 3)
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), *dims)).astype(dtype)
    w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k, k)).astype(dtype)
    return x, w, stride, pad


def test_direct_conv_matches_loop_oracle_bitwise():
    rng = np.random.default_rng(10)
    with T.ordered(True):
        for _ in range(5):
            x, w, stride, pad = random_case(rng)
            np.testing.assert_array_equal(K.conv3d_direct(x, w, stride, pad), loop_conv(x, w, stride, pad))


def test_fast_conv_paths_agree_closely():
    rng = np.random.default_rng(11)
    with T.ordered(False):
        for _ in range(10):
            x, w, stride, pad = random_case(rng)
            ref = loop_conv(x, w, stride, pad)
            np.testing.assert_allclose(K.conv3d_direct(x, w, stride, pad), ref, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(K.conv3d_im2col(x, w, stride, pad), ref, rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_input():
    x = np.zeros((1, 2, 4, 4, 4))
    with pytest.raises(DimensionError, match="channel"):
        K.conv3d_direct(x, np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(DimensionError, match="kernels"):
        K.conv3d_direct(x, np.zeros((1, 2, 5, 5, 5)))
    with pytest.raises(DTypeError):
        K.conv3d_direct(x, np.zeros((1, 2, 3, 3, 3), np.float32))


def test_conv_bias_and_padding_shape():
    x = np.ones((2, 1, 30, 30, 30), np.float32)
    w = np.ones((8, 1, 3, 3, 3), np.float32)
    y, _ = K.conv3d_forward(x, w, np.full(8, 0.5, np.float32), pad=1)
    assert y.shape == (2, 8, 30, 30, 30)
    assert y[0, 0, 15, 15, 15] == 27.5
    assert y[0, 0, 0, 0, 0] == 8.5


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((4, 3, 3, 3, 3)) * 3 + 2
    y, _, rm, rv = K.batchnorm3d_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1, rtol=1e-4)
    mean, var = T.channel_moments(x)
    np.testing.assert_allclose(rm, 0.01 * mean)
    np.testing.assert_allclose(rv, 0.99 + 0.01 * var)


def test_batchnorm_eval_uses_running_stats():
    x = np.full((1, 2, 1, 1, 1), 3.0)
    y, _, rm, rv = K.batchnorm3d_forward(
        x, np.array([2.0, 1.0]), np.array([0.0, 1.0]), np.array([1.0, 3.0]), np.array([4.0, 1.0]),
        train=False, eps=0.0,
    )
    np.testing.assert_allclose(y.ravel(), [2.0, 1.0])
    np.testing.assert_array_equal(rm, [1.0, 3.0])


def test_batchnorm_single_value_per_channel_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        K.batchnorm3d_forward(np.ones((1, 2, 1, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), train=True)


def test_maxpool_ceil_pad_shape_and_tie_break():
    x = np.zeros((1, 1, 30, 30, 30))
    y, ctx = K.maxpool3d_forward(x, 4, 4, ceil_pad=True)
    assert y.shape == (1, 1, 8, 8, 8)
    (g,) = K.maxpool3d_backward(ctx, np.ones_like(y))
    # all-equal windows route the gradient to the first element of each window
    assert g.sum() == 8**3
    assert g[0, 0, 0, 0, 0] == 1 and g[0, 0, 1, 0, 0] == 0
    assert g[0, 0, 28, 28, 28] == 1


def test_maxpool_value():
    x = np.arange(64, dtype=np.float64).reshape(1, 1, 4, 4, 4)
    y, _ = K.maxpool3d_forward(x, 2)
    np.testing.assert_array_equal(y.ravel(), [21, 23, 29, 31, 53, 55, 61, 63])


def test_dense_and_global_pool():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((3, 4, 2, 2, 2))
    p, _ = K.avgpool3d_global_forward(x)
    np.testing.assert_allclose(p, x.reshape(3, 4, -1).mean(-1))
    w, b = rng.standard_normal((4, 5)), rng.standard_normal(5)
    y, _ = K.dense_forward(p, w, b)
    np.testing.assert_allclose(y, p @ w + b, rtol=1e-13)
    with pytest.raises(DimensionError):
        K.dense_forward(p, w.T, b)


def test_dropout_statistics():
    rng = np.random.default_rng(14)
    x = np.ones(10**6)
    y, mask = K.dropout_forward(x, 0.3, train=True, rng=rng)
    kept = np.count_nonzero(y)
    # binomial std of the kept fraction is ~4.6e-4
    assert abs(kept / x.size - 0.7) < 5 * 4.6e-4
    assert abs(y.mean() - 1.0) < 5 * 6.5e-4
    np.testing.assert_allclose(y[y != 0], 1 / 0.7)
    y_eval, m_eval = K.dropout_forward(x, 0.3, train=False)
    assert y_eval is x and m_eval is None


def test_softmax_xent_uniform_logits():
    loss, probs, _ = K.softmax_xent_forward(np.zeros((4, 40)), np.arange(4))
    assert loss == pytest.approx(np.log(40), abs=1e-15)
    np.testing.assert_allclose(probs, 1 / 40)


def test_softmax_xent_stable_for_large_logits():
    loss, probs, _ = K.softmax_xent_forward(np.array([[1000.0, 0.0], [0.0, 1000.0]]), np.array([0, 0]))
    assert np.isfinite(loss) and loss == pytest.approx(500.0)


def test_softmax_xent_label_errors_name_the_row():
    with pytest.raises(LabelError, match="row 2"):
        K.softmax_xent_forward(np.zeros((3, 4)), np.array([0, 1, 4]))
    with pytest.raises(LabelError):
        K.softmax_xent_forward(np.zeros((1, 4)), np.array([0.5]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), k=st.integers(2, 10), scale=st.floats(0.1, 50), seed=st.integers(0, 2**16))
def test_softmax_rows_are_distributions(n, k, scale, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, k)) * scale
    loss, probs, ctx = K.softmax_xent_forward(logits, rng.integers(0, k, n))
    assert loss >= 0
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)
    (g,) = K.softmax_xent_backward(ctx)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), window=st.sampled_from([2, 3, 4]))
def test_maxpool_gradient_conserves_mass(seed, window):
    rng = np.random.default_rng(seed)
    # positive inputs, so the zero padding never wins a window
    x = np.abs(rng.standard_normal((1, 2, 7, 5, 6))) + 0.1
    y, ctx = K.maxpool3d_forward(x, window, window, ceil_pad=True)
    gy = rng.standard_normal(y.shape)
    (gx,) = K.maxpool3d_backward(ctx, gy)
    assert gx.shape == x.shape
    assert gx.sum() == pytest.approx(gy.sum(), abs=1e-9)
    assert np.count_nonzero(gx) <= y.size
