"""Tensor-op tests: brute-force oracles, finite-difference gradient checks,
and the linearity identities the downstream analyses rely on."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fovlab import ops


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Brute-force oracles (kept as slow, obviously-correct loops in float64)


def conv2d_loops(x, kernels, bias, stride, pad):
    c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((f, oh, ow), dtype=np.float64)
    for fi in range(f):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ci in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += xp[ci, oy * stride + ky, ox * stride + kx] \
                                * kernels[fi, ci, ky, kx]
                out[fi, oy, ox] = acc + bias[fi]
    return out


def maxpool2_windows(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=np.float64)
    for ci in range(c):
        for oy in range(h // 2):
            for ox in range(w // 2):
                out[ci, oy, ox] = max(x[ci, 2 * oy + dy, 2 * ox + dx]
                                      for dy in (0, 1) for dx in (0, 1))
    return out


def dense_loops(x, weights, bias):
    m, n = weights.shape
    out = np.zeros(m, dtype=np.float64)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += weights[i, j] * x[j]
        out[i] = acc + bias[i]
    return out


def resize_pixel(x, oy, ox, out_h, out_w):
    """Scalar reimplementation of one bilinear output sample."""
    c, h, w = x.shape
    sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
    sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    vals = []
    for ci in range(c):
        top = x[ci, y0, x0] * (1 - fx) + x[ci, y0, x1] * fx
        bot = x[ci, y1, x0] * (1 - fx) + x[ci, y1, x1] * fx
        vals.append(top * (1 - fy) + bot * fy)
    return np.array(vals)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_scalar_multiply():
    out = ops.conv2d(np.array([[[2.0]]], dtype=np.float32),
                     np.array([[[[3.0]]]], dtype=np.float32),
                     np.zeros(1, dtype=np.float32))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 6.0


def test_conv2d_sum_of_ones():
    x = np.ones((1, 3, 3), dtype=np.float32)
    k = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = ops.conv2d(x, k, np.zeros(1, dtype=np.float32))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, pad):
    r = rng(11)
    x = r.standard_normal((2, 5, 5)).astype(np.float32)
    k = r.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = r.standard_normal(3).astype(np.float32)
    got = ops.conv2d(x, k, b, stride, pad)
    want = conv2d_loops(x.astype(np.float64), k.astype(np.float64),
                        b.astype(np.float64), stride, pad)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_conv2d_shape_errors():
    x = np.zeros((2, 4, 4), dtype=np.float32)
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(x, np.zeros((1, 3, 3, 3), dtype=np.float32),
                   np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError, match="larger"):
        ops.conv2d(x, np.zeros((1, 2, 5, 5), dtype=np.float32),
                   np.zeros(1, dtype=np.float32))
    with pytest.raises(ValueError, match="bias"):
        ops.conv2d(x, np.zeros((2, 2, 3, 3), dtype=np.float32),
                   np.zeros(3, dtype=np.float32))


# ---------------------------------------------------------------------------
# relu / maxpool / dense


def test_relu_basic():
    np.testing.assert_array_equal(
        ops.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = -np.abs(rng(1).standard_normal((3, 4)))
    assert not ops.relu(x).any()


def test_relu_gradient_of_sum():
    x = np.array([-1.0, 2.0])
    g = ops.relu_grad(np.ones_like(x), x)
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_maxpool_single_window():
    out = ops.maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_array_equal(out, [[[4.0]]])


def test_maxpool_constant():
    x = np.full((2, 4, 6), 3.5, dtype=np.float32)
    out = ops.maxpool2(x)
    assert out.shape == (2, 2, 3)
    assert (out == 3.5).all()


def test_maxpool_matches_window_oracle():
    x = rng(5).standard_normal((1, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(ops.maxpool2(x), maxpool2_windows(x), atol=1e-6)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ValueError, match="even"):
        ops.maxpool2(np.zeros((1, 3, 4)))


def test_maxpool_tie_goes_to_first_cell():
    x = np.full((1, 2, 2), 1.0)
    g = ops.maxpool2_grad(np.array([[[5.0]]]), x)
    np.testing.assert_array_equal(g, [[[5.0, 0.0], [0.0, 0.0]]])


def test_dense_identity_and_zero():
    x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    np.testing.assert_array_equal(
        ops.dense(x, np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32)), x)
    b = np.array([4.0, 5.0], dtype=np.float32)
    np.testing.assert_array_equal(
        ops.dense(x, np.zeros((2, 3), dtype=np.float32), b), b)


def test_dense_matches_loop_oracle():
    r = rng(3)
    x = r.standard_normal(4).astype(np.float32)
    w = r.standard_normal((3, 4)).astype(np.float32)
    b = r.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(ops.dense(x, w, b), dense_loops(x, w, b), atol=1e-6)


def test_dense_shape_error():
    with pytest.raises(ValueError, match="mismatch"):
        ops.dense(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


# ---------------------------------------------------------------------------
# bilinear resize


def test_resize_same_size_is_identity():
    x = rng(7).uniform(0, 255, (3, 6, 5)).astype(np.float32)
    np.testing.assert_array_equal(ops.bilinear_resize(x, 6, 5), x)


def test_resize_constant_stays_constant():
    x = np.full((2, 4, 4), 17.25, dtype=np.float32)
    out = ops.bilinear_resize(x, 9, 3)
    np.testing.assert_allclose(out, 17.25, atol=1e-5)


def test_resize_matches_scalar_oracle():
    x = rng(9).uniform(0, 255, (2, 4, 6)).astype(np.float32)
    out = ops.bilinear_resize(x, 7, 5)
    for oy in range(7):
        for ox in range(5):
            want = resize_pixel(x.astype(np.float64), oy, ox, 7, 5)
            np.testing.assert_allclose(out[:, oy, ox], want, atol=1e-4)


def test_resize_linearity_identity():
    r = rng(13)
    x = r.uniform(0, 255, (1, 4, 4)).astype(np.float32)
    eps = r.uniform(-10, 10, (1, 4, 4)).astype(np.float32)
    lhs = ops.bilinear_resize(x + eps, 7, 7)
    rhs = ops.bilinear_resize(x, 7, 7) + ops.bilinear_resize(eps, 7, 7)
    assert np.abs(lhs - rhs).max() < 1e-4


def test_resize_linear_combination_property():
    r = rng(17)
    for trial in range(20):
        u = r.uniform(0, 255, (2, 5, 5)).astype(np.float32)
        v = r.uniform(0, 255, (2, 5, 5)).astype(np.float32)
        a, b = r.uniform(-4, 4, 2)
        lhs = ops.bilinear_resize((a * u + b * v).astype(np.float32), 8, 3)
        rhs = a * ops.bilinear_resize(u, 8, 3) + b * ops.bilinear_resize(v, 8, 3)
        assert np.abs(lhs - rhs).max() < 1e-4


def test_resize_rejects_empty_output():
    with pytest.raises(ValueError, match="positive"):
        ops.bilinear_resize(np.zeros((1, 4, 4)), 0, 3)


# ---------------------------------------------------------------------------
# norms


def test_norms_examples():
    assert ops.norms(np.zeros(4)) == (0.0, 0.0)
    assert ops.norms(np.array([3.0, -3.0])) == (3.0, 3.0)
    got = ops.norms(np.array([1.0, 2.0, -3.0, 0.0]))
    assert got.l1_per_pixel == pytest.approx(1.5)
    assert got.linf == 3.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=12),
       st.floats(-8, 8))
def test_norms_absolute_homogeneity(values, c):
    t = np.array(values, dtype=np.float64)
    base = ops.norms(t).l1_per_pixel
    scaled = ops.norms(c * t).l1_per_pixel
    assert scaled == pytest.approx(abs(c) * base, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# gradients vs central finite differences (float64 forward for the oracle)


def directional_check(forward, grad, x, n_probes=8, h=1e-2, rel_tol=1e-3, seed=0):
    r = np.random.default_rng(seed)
    for _ in range(n_probes):
        d = r.standard_normal(x.shape)
        d /= np.abs(d).max()
        num = (forward(x + h * d) - forward(x - h * d)) / (2 * h)
        ana = float(np.sum(grad * d))
        assert abs(num - ana) <= rel_tol * max(abs(num), abs(ana), 1e-6)


def test_conv2d_input_gradient_fd():
    r = rng(21)
    x = r.uniform(0, 255, (2, 6, 6))
    k = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    w = r.standard_normal((3, 4, 4))  # weights of the scalar objective

    def forward(xx):
        return float(np.sum(ops.conv2d(xx, k, b, 1, 0) * w))

    grad = ops.conv2d_input_grad(w, k, x.shape, 1, 0)
    directional_check(forward, grad, x, n_probes=12)


def test_conv2d_weight_gradient_fd():
    r = rng(22)
    x = r.uniform(0, 255, (2, 5, 5))
    k = r.standard_normal((2, 2, 3, 3))
    b = r.standard_normal(2)
    up = r.standard_normal((2, 3, 3))

    def forward_k(kk):
        return float(np.sum(ops.conv2d(x, kk, b, 1, 0) * up))

    dk, db = ops.conv2d_weight_grad(up, x, k.shape, 1, 0)
    directional_check(forward_k, dk, k, n_probes=10)
    num_db = np.array([
        (float(np.sum(ops.conv2d(x, k, b + h_one(i, 2, 1e-3), 1, 0) * up))
         - float(np.sum(ops.conv2d(x, k, b - h_one(i, 2, 1e-3), 1, 0) * up))) / 2e-3
        for i in range(2)])
    np.testing.assert_allclose(db, num_db, rtol=1e-4)


def h_one(i, n, h):
    v = np.zeros(n)
    v[i] = h
    return v


def test_maxpool_gradient_fd():
    r = rng(23)
    x = r.uniform(0, 255, (2, 4, 4))
    up = r.standard_normal((2, 2, 2))

    def forward(xx):
        return float(np.sum(ops.maxpool2(xx) * up))

    grad = ops.maxpool2_grad(up, x)
    # h smaller than the minimum gap between window values, so argmax is stable
    directional_check(forward, grad, x, n_probes=10, h=1e-3)


def test_dense_gradient_fd():
    r = rng(24)
    x = r.uniform(0, 255, 6)
    w = r.standard_normal((3, 6))
    b = r.standard_normal(3)
    up = r.standard_normal(3)

    def forward(xx):
        return float(np.dot(ops.dense(xx, w, b), up))

    gx, gw, gb = ops.dense_grads(up, x, w)
    directional_check(forward, gx, x, n_probes=10)


def test_resize_gradient_fd():
    r = rng(25)
    x = r.uniform(0, 255, (2, 5, 5))
    up = r.standard_normal((2, 8, 3))

    def forward(xx):
        return float(np.sum(ops.bilinear_resize(xx, 8, 3) * up))

    grad = ops.bilinear_resize_grad(up, 5, 5)
    directional_check(forward, grad, x, n_probes=10)


def test_relu_gradient_fd():
    r = rng(26)
    x = r.standard_normal((3, 4))
    x[np.abs(x) < 0.05] = 0.1  # keep probes away from the kink
    up = r.standard_normal((3, 4))

    def forward(xx):
        return float(np.sum(ops.relu(xx) * up))

    grad = ops.relu_grad(up, x)
    directional_check(forward, grad, x, n_probes=10, h=1e-3)
