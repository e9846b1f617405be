import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pasnet import tensor as T
from pasnet.tensor import NonFiniteError, RunningStats, ShapeError, Tensor, backward, grad_check


def direct_conv(x, w, b, stride, pad):
    """Direct-summation cross-correlation, loops over every output element."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[a, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[a, o, i, j] = acc
    return out


def window_max(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, ch, i, j] = max(x[a, ch, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
    return out


# --- conv2d -------------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv_full_scale_shape():
    assert T.conv_output_size(448, 3, 1, 1) == 448
    x = Tensor(np.zeros((1, 10, 448, 448), dtype=np.float32))
    w = Tensor(np.zeros((32, 10, 3, 3), dtype=np.float32))
    assert T.conv2d(x, w, stride=1, pad=1).shape == (1, 32, 448, 448)


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (2, 1, 0)])
def test_conv_matches_direct_summation(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, direct_conv(x, w, b, stride, pad), atol=1e-5)


def test_conv_rejects_bad_shapes():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), stride=3)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((2, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(3)), pad=1)


# --- pooling, elementwise -----------------------------------------------------


def test_maxpool_examples():
    assert T.maxpool2d(Tensor([[[[1, 2], [3, 4]]]])).data.item() == 4.0
    np.testing.assert_array_equal(T.maxpool2d(Tensor(np.full((1, 2, 4, 4), 2.5))).data, 2.5)


def test_maxpool_matches_window_scan():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data, window_max(x))


def test_maxpool_tie_routes_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 1.0), requires_grad=True)
    backward(T.tsum(T.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_maxpool_rejects_odd():
    with pytest.raises(ShapeError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.5, 2.0])).data, [0.0, 2.0])


def test_concat_order():
    a = Tensor(np.zeros((1, 2, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    out = T.concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    assert out.data[0, :2].sum() == 0 and np.all(out.data[0, 2:] == 1)
    with pytest.raises(ShapeError):
        T.concat_channels(a, Tensor(np.zeros((1, 1, 2, 4))))


def test_add_rejects_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_upsample_nearest():
    x = Tensor([[[[1, 2], [3, 4]]]])
    out = T.upsample_nearest2x(x).data[0, 0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_batchnorm_training_moments():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    stats = RunningStats.fresh(3)
    out = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, training=True).data.astype(np.float64)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_running_update_and_eval():
    x = np.random.default_rng(0).standard_normal((2, 2, 3, 3)).astype(np.float32) + 5
    stats = RunningStats.fresh(2)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    T.batchnorm2d(Tensor(x), g, b, stats, training=True)
    mu = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(stats.mean, 0.1 * mu, rtol=1e-6)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-5)
    out = T.batchnorm2d(Tensor(x), g, b, stats, training=False).data
    expect = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, rtol=1e-5)


# --- GAP and linear -----------------------------------------------------------


def test_gap_examples():
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.full((1, 3, 2, 2), 7.0))).data, [[7, 7, 7]])
    assert T.global_avg_pool(Tensor([[[[1, 3], [5, 7]]]])).data.item() == 4.0


def test_gap_matches_summation():
    x = np.random.default_rng(5).random((2, 512, 14, 14)).astype(np.float32)
    ref = np.zeros((2, 512))
    for n in range(2):
        for c in range(512):
            ref[n, c] = sum(float(v) for v in x[n, c].ravel()) / 196
    np.testing.assert_allclose(T.global_avg_pool(Tensor(x)).data, ref, atol=1e-6)


def test_linear_identity_and_shape():
    x = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = T.linear(Tensor(np.zeros((16, 512))), Tensor(np.zeros((4, 512))), Tensor(np.zeros(4)))
    assert out.shape == (16, 4)
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros((2, 5))), Tensor(np.zeros((4, 6))))


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(9)
    x, w, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3)), rng.standard_normal(3)
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ref[i, j] = b[j] + sum(float(x[i, k]) * float(w[j, k]) for k in range(3))
    got = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, ref, atol=1e-6)


# --- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square():
    xv = np.random.default_rng(1).standard_normal((4,)).astype(np.float32)
    x = Tensor(xv, requires_grad=True)
    backward(T.scale(T.tsum(T.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, xv, rtol=1e-6)


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.tsum(x)
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_fan_out_sums():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(T.tsum(T.add(x, T.relu(x))))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.relu(x))


def test_composite_graph_grad_check():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.5, requires_grad=True)
    lw = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)).astype(np.float32))
    labels = [1, 3]
    from pasnet.losses import cross_entropy_logits

    def f(t):
        h = T.global_avg_pool(T.relu(T.conv2d(t, w, None, 1, 1)))
        return cross_entropy_logits(T.linear(h, lw), labels)

    assert grad_check(f, x) < 1e-2
    assert grad_check(lambda _: f(x), w) < 1e-2
    assert grad_check(lambda _: f(x), lw) < 1e-2


def test_grad_check_of_sum_is_exact():
    x = Tensor(np.random.default_rng(0).standard_normal(5))
    assert grad_check(T.tsum, x) < 1e-3


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.scale(Tensor([1e38]), 1e10)


def test_no_grad_skips_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad


# --- properties ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 3), cin=st.integers(1, 4), cout=st.integers(1, 4), h=st.integers(3, 12),
       w=st.integers(3, 12), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), pad=st.integers(0, 1))
def test_conv_shape_algebra(n, cin, cout, h, w, k, stride, pad):
    out = T.conv2d(Tensor(np.zeros((n, cin, h, w))), Tensor(np.zeros((cout, cin, k, k))), None, stride, pad)
    assert out.shape == (n, cout, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 5), h=st.integers(1, 6), w=st.integers(1, 6))
def test_spatial_shape_algebra(n, c, h, w):
    x = Tensor(np.zeros((n, c, 2 * h, 2 * w)))
    assert T.maxpool2d(x).shape == (n, c, h, w)
    assert T.upsample_nearest2x(x).shape == (n, c, 4 * h, 4 * w)
    assert T.global_avg_pool(x).shape == (n, c)
    assert T.concat_channels(x, x).shape == (n, 2 * c, 2 * h, 2 * w)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
    r = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32), requires_grad=True)

    def f():
        return T.tsum(T.mul(T.conv2d(x, w, None, 1, 1), Tensor(r)))

    def g():
        return T.tsum(T.mul(x, x))

    backward(f())
    gf = x.grad.copy()
    x.zero_grad()
    backward(g())
    gg = x.grad.copy()
    x.zero_grad()
    backward(T.add(T.scale(f(), a), T.scale(g(), b)))
    np.testing.assert_allclose(x.grad, a * gf + b * gg, atol=1e-5 * (1 + np.abs(a * gf + b * gg).max()))


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        xt = Tensor(x.copy(), requires_grad=True)
        y = T.tsum(T.relu(T.conv2d(xt, Tensor(w), None, 2, 1)))
        backward(y)
        return y.data.copy(), xt.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()
