import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from grcnn import kernels as K
from grcnn.gradcheck import relative_error


def direct_conv(x, w, b, stride, pad):
    # correlation by explicit scipy calls, one (n, o) pair at a time
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, o = x.shape[0], w.shape[0]
    full = [[sum(signal.correlate2d(xp[i, c], w[j, c], mode="valid") for c in range(x.shape[1])) for j in range(o)]
            for i in range(n)]
    out = np.asarray(full)[:, :, ::stride, ::stride]
    return out + (0 if b is None else b[None, :, None, None])


def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3)[:, :, None, None]
    out, _ = K.conv2d(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_ones_kernel_center_and_corner():
    out, _ = K.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == out[0, 0, 0, 2] == 4


def test_stride_shape():
    out, _ = K.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)
    assert K.ConvSpec(1, 1, 3, 2, 1).output_hw(4, 4) == (2, 2)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_correlation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out, _ = K.conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out, direct_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors_name_dimension():
    with pytest.raises(K.ShapeError, match="channel"):
        K.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(K.ShapeError):
        K.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


def test_conv_backward_trivia():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    out, cache = K.conv2d(x, w, np.zeros(4), 1, 1)
    dx, dw, db = K.conv2d_backward(cache, np.zeros_like(out))
    assert not dx.any() and not dw.any() and not db.any()
    eye = np.eye(3)[:, :, None, None]
    out, cache = K.conv2d(x, eye)
    d = rng.standard_normal(out.shape)
    np.testing.assert_array_equal(K.conv2d_backward(cache, d)[0], d)


def test_conv_backward_fd():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    r = rng.standard_normal((2, 4, 5, 5))
    _, cache = K.conv2d(x, w, b, 1, 1)
    dx, dw, db = K.conv2d_backward(cache, r)
    f = lambda _: np.sum(K.conv2d(x, w, b, 1, 1)[0] * r)  # noqa: E731
    for analytic, p in ((dx, x), (dw, w), (db, b)):
        assert relative_error(analytic, K.finite_difference_gradient(f, p)) < 1e-6


def test_conv_backward_rejects_bad_dout():
    _, cache = K.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)))
    with pytest.raises(K.ShapeError):
        K.conv2d_backward(cache, np.zeros((1, 1, 4, 4)))


def test_batch_norm_normalizes():
    x = np.random.default_rng(3).normal(3.0, 2.0, (16, 4, 3, 3))
    out, _, new = K.batch_norm(x, K.BatchNormState.create(4), "train")
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + 1e-5), atol=1e-9)
    np.testing.assert_allclose(new.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))


def test_batch_norm_collapse_and_immutability():
    st0 = K.BatchNormState.create(2)
    st0 = K.BatchNormState(np.zeros(2), np.full(2, 5.0), st0.running_mean, st0.running_var)
    before = st0.running_mean.copy()
    out, _, new = K.batch_norm(np.random.default_rng(0).standard_normal((4, 2, 3, 3)), st0, "train")
    np.testing.assert_array_equal(out, 5.0)
    np.testing.assert_array_equal(st0.running_mean, before)
    assert new is not st0


def test_batch_norm_errors():
    with pytest.raises(ValueError):
        K.batch_norm(np.zeros((0, 2, 3, 3)), K.BatchNormState.create(2), "train")
    bad = K.BatchNormState(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError, match="running_var"):
        K.batch_norm(np.zeros((2, 2, 3, 3)), bad, "eval")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_backward_fd(mode):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 2, 4, 4))
    bn = K.BatchNormState(rng.uniform(0.5, 2, 2), rng.standard_normal(2), rng.standard_normal(2),
                          rng.uniform(0.5, 2, 2))
    r = rng.standard_normal(x.shape)
    _, cache, _ = K.batch_norm(x, bn, mode)
    dx, dg, db = K.batch_norm_backward(cache, r)
    f = lambda _: np.sum(K.batch_norm(x, bn, mode)[0] * r)  # noqa: E731
    for analytic, p in ((dx, x), (dg, bn.gamma), (db, bn.beta)):
        assert relative_error(analytic, K.finite_difference_gradient(f, p)) < 1e-6


def test_activations():
    assert K.sigmoid(np.array(0.0))[0] == 0.5
    out, _ = K.relu(np.array([-3.0, 3.0]))
    np.testing.assert_array_equal(out, [0.0, 3.0])
    _, c = K.sigmoid(np.array([0.0]))
    assert K.sigmoid_backward(c, np.array([1.0]))[0] == 0.25
    out, _ = K.relu(np.array([-0.0, -1e-300]))
    assert not np.signbit(out).any()
    with pytest.raises(ValueError):
        K.activation(np.zeros(1), "tanh")


def test_sigmoid_extremes_are_finite():
    out, c = K.sigmoid(np.array([-1000.0, 1000.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])
    assert np.isfinite(K.sigmoid_backward(c, np.ones(2))).all()


def test_hadamard():
    out, _ = K.hadamard(np.array([2.0, 3.0]), np.array([4.0, 5.0]))
    np.testing.assert_array_equal(out, [8, 15])
    a = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_array_equal(K.hadamard(a, np.ones(5))[0], a)
    assert not K.hadamard(a, np.zeros(5))[0].any()
    with pytest.raises(K.ShapeError):
        K.hadamard(np.zeros(2), np.zeros(3))


def test_linear_and_pool():
    x = np.random.default_rng(5).standard_normal((3, 4))
    np.testing.assert_array_equal(K.linear(x, np.eye(4), np.zeros(4))[0], x)
    np.testing.assert_array_equal(K.global_avg_pool(np.full((2, 3, 4, 4), 1.5))[0].reshape(2, 3), 1.5)
    with pytest.raises(K.ShapeError):
        K.linear(x, np.eye(5), None)


def test_linear_and_pool_fd():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    r = rng.standard_normal((3, 5))
    _, c = K.linear(x, w, b)
    dx, dw, db = K.linear_backward(c, r)
    f = lambda _: np.sum(K.linear(x, w, b)[0] * r)  # noqa: E731
    for analytic, p in ((dx, x), (dw, w), (db, b)):
        assert relative_error(analytic, K.finite_difference_gradient(f, p)) < 1e-6
    m = rng.standard_normal((2, 3, 4, 4))
    out, c = K.global_avg_pool(m)
    rp = rng.standard_normal(out.shape)
    g = K.global_avg_pool_backward(c, rp)
    num = K.finite_difference_gradient(lambda _: np.sum(K.global_avg_pool(m)[0] * rp), m)
    assert relative_error(g, num) < 1e-6


def test_softmax_cross_entropy_values():
    loss, _ = K.softmax_cross_entropy(np.zeros((1, 10)), np.eye(10)[[3]])
    assert abs(loss - np.log(10)) < 1e-12
    loss, _ = K.softmax_cross_entropy(np.zeros((1, 2)), np.array([[0.7, 0.3]]))
    assert abs(loss - np.log(2)) < 1e-12
    logits = np.random.default_rng(7).standard_normal((4, 6))
    _, d = K.softmax_cross_entropy(logits, K.softmax(logits))
    np.testing.assert_allclose(d, 0, atol=1e-15)


def test_softmax_cross_entropy_names_bad_row():
    labels = np.array([[1.0, 0.0], [0.6, 0.6]])
    with pytest.raises(ValueError, match="row 1"):
        K.softmax_cross_entropy(np.zeros((2, 2)), labels)


def test_fft():
    spec = K.fft2d(np.full((4, 6), 2.5))
    assert abs(spec[0, 0] - 2.5 * 24) < 1e-9
    spec[0, 0] = 0
    assert np.abs(spec).max() < 1e-9
    x = np.random.default_rng(8).standard_normal((8, 8))
    np.testing.assert_allclose(K.ifft2d(K.fft2d(x)).real, x, atol=1e-9)
    X = K.fft2d(x)
    assert abs(np.sum(x**2) - np.sum(np.abs(X) ** 2) / 64) / np.sum(x**2) < 1e-9


def test_finite_difference_gradient():
    g = K.finite_difference_gradient(lambda p: float(p[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6
    assert not K.finite_difference_gradient(lambda p: 1.0, np.ones(4)).any()
    with pytest.raises(FloatingPointError):
        K.finite_difference_gradient(lambda p: np.inf, np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 9), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 1), st.integers(0, 2**31 - 1))
def test_conv_shape_formula_property(n, c, size, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((2, c, k, k))
    out, _ = K.conv2d(x, w, None, stride, pad)
    ho = (size + 2 * pad - k) // stride + 1
    assert out.shape == (n, 2, ho, ho)
    assert np.isfinite(out).all()
