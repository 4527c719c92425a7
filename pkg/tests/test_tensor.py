import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import avgpool_loops, bilinear_loops, central_difference, conv2d_loops, rel_error
from spikedistill import tensor as tc


def test_make_rng_streams_are_keyed():
    a = tc.make_rng(3, 1, 2).random(5)
    b = tc.make_rng(3, 1, 2).random(5)
    c = tc.make_rng(3, 2, 1).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    for _ in range(5):
        x = rng.standard_normal((2, 3, 7, 6))
        k = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        got = tc.conv2d(x, k, stride, pad, b)
        np.testing.assert_allclose(got, conv2d_loops(x, k, stride, pad, b), atol=1e-12)


def test_conv2d_float32_stays_float32():
    x = np.ones((1, 1, 4, 4), np.float32)
    k = np.ones((1, 1, 3, 3), np.float32)
    out = tc.conv2d(x, k, pad=1)
    assert out.dtype == np.float32
    assert out[0, 0, 1, 1] == 9 and out[0, 0, 0, 0] == 4


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ValueError, match="channel"):
        tc.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError, match="larger"):
        tc.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))
    with pytest.raises(ValueError, match="4-D"):
        tc.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_backward_finite_differences(stride, pad):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = tc.conv2d(x, k, stride, pad, b)
    g = rng.standard_normal(out.shape)

    def loss():
        return float((tc.conv2d(x, k, stride, pad, b) * g).sum())

    gx, gk, gb = tc.conv2d_backward(g, x, k, stride, pad)
    assert rel_error(gx, central_difference(loss, x)) < 1e-6
    assert rel_error(gk, central_difference(loss, k)) < 1e-6
    assert rel_error(gb, central_difference(loss, b)) < 1e-6


def test_linear_backward_finite_differences():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    g = rng.standard_normal((4, 3))

    def loss():
        return float((tc.linear(x, w, b) * g).sum())

    gx, gw, gb = tc.linear_backward(g, x, w)
    for analytic, var in ((gx, x), (gw, w), (gb, b)):
        assert rel_error(analytic, central_difference(loss, var)) < 1e-6


def test_avgpool_matches_loops_and_fd():
    rng = np.random.default_rng(2)
    for k in (1, 2, 3):
        x = rng.standard_normal((2, 3, 6, 6))
        np.testing.assert_allclose(tc.avgpool2d(x, k), avgpool_loops(x, k), atol=1e-12)
    x = rng.standard_normal((1, 2, 4, 4))
    g = rng.standard_normal((1, 2, 2, 2))
    num = central_difference(lambda: float((tc.avgpool2d(x, 2) * g).sum()), x)
    assert rel_error(tc.avgpool2d_backward(g, 2), num) < 1e-6


def test_avgpool_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        tc.avgpool2d(np.zeros((1, 1, 5, 4)), 2)


def test_maxpool_backward_routes_to_first_max():
    x = np.array([[[[1.0, 3.0], [3.0, 0.0]]]])
    g = np.array([[[[2.0]]]])
    assert tc.maxpool2d(x, 2)[0, 0, 0, 0] == 3.0
    np.testing.assert_array_equal(tc.maxpool2d_backward(g, x, 2)[0, 0], [[0, 2], [0, 0]])


def test_maxpool_backward_fd_without_ties():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 4, 4))
    g = rng.standard_normal((2, 2, 2, 2))
    num = central_difference(lambda: float((tc.maxpool2d(x, 2) * g).sum()), x, eps=1e-5)
    assert rel_error(tc.maxpool2d_backward(g, x, 2), num) < 1e-6


def test_relu_backward():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(tc.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(tc.relu_backward(np.ones(3), x), [0, 0, 1])


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 2, 2))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    g = rng.standard_normal(x.shape)

    def loss():
        return float((tc.batchnorm_train(x, gamma, beta)[0] * g).sum())

    _, _, _, cache = tc.batchnorm_train(x, gamma, beta)
    gx, gg, gb = tc.batchnorm_backward(g, gamma, cache)
    assert rel_error(gx, central_difference(loss, x)) < 1e-5
    assert rel_error(gg, central_difference(loss, gamma)) < 1e-6
    assert rel_error(gb, central_difference(loss, beta)) < 1e-6


def test_batchnorm_eval_uses_running_stats():
    x = np.full((2, 1, 1, 1), 3.0)
    out = tc.batchnorm_eval(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), eps=0)
    np.testing.assert_allclose(out, 2.0 * (3 - 1) / 2 + 1)


def test_dropout_mask_is_inverted():
    mask = tc.dropout_mask(tc.make_rng(0), (200_000,), 0.2)
    assert set(np.unique(mask)) <= {0.0, np.float32(1.25)}
    assert abs(mask.mean() - 1.0) < 0.01
    assert np.all(tc.dropout_mask(tc.make_rng(0), (3,), 0.0) == 1)


def test_bilinear_center_value():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = tc.interpolate_bilinear(img, (3, 3))
    assert out[1, 1] == 1.5
    np.testing.assert_array_equal(out[[0, 0, -1, -1], [0, -1, 0, -1]], [0, 1, 2, 3])


def test_bilinear_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        h, w = rng.integers(1, 6, size=2)
        h2, w2 = rng.integers(1, 9, size=2)
        img = rng.standard_normal((h, w))
        np.testing.assert_allclose(tc.interpolate_bilinear(img, (h2, w2)),
                                   bilinear_loops(img, h2, w2), atol=1e-12)


def test_bilinear_rejects_empty_target():
    with pytest.raises(ValueError):
        tc.interpolate_bilinear(np.ones((2, 2)), (0, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(0, 10_000))
def test_conv2d_is_linear_in_input(c, f, pad, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, c, 5, 5))
    k = rng.standard_normal((f, c, 3, 3))
    lhs = tc.conv2d(x1 + 2 * x2, k, 1, pad)
    rhs = tc.conv2d(x1, k, 1, pad) + 2 * tc.conv2d(x2, k, 1, pad)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_avgpool_preserves_mean(k, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, 4 * k, 4 * k))
    assert abs(tc.avgpool2d(x, k).mean() - x.mean()) < 1e-12


def test_conv_backward_without_input_grad():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 2, 5, 5)).astype(np.float32)
    k = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    g = rng.standard_normal((3, 4, 5, 5)).astype(np.float32)
    full = tc.conv2d_backward(g, x, k, 1, 1)
    part = tc.conv2d_backward(g, x, k, 1, 1, input_grad=False)
    assert part[0] is None
    np.testing.assert_array_equal(part[1], full[1])
    np.testing.assert_array_equal(part[2], full[2])


def test_long_reductions_stay_accurate():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((50_000, 3)).astype(np.float32)
    b = rng.standard_normal((50_000, 2)).astype(np.float32)
    exact = a.astype(np.float64).T @ b.astype(np.float64)
    np.testing.assert_allclose(tc._matmul_tn(a, b), exact, rtol=1e-5, atol=1e-3)
