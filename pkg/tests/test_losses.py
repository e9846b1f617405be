import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pasnet import tensor as T
from pasnet.losses import LossConfig, bce_with_logits, cross_entropy_logits, total_loss
from pasnet.metrics import softmax
from pasnet.tensor import DTYPE, NonFiniteError, ShapeError, Tensor, backward


def test_uniform_logits_give_ln4():
    for label in range(4):
        loss = cross_entropy_logits(Tensor(np.full((1, 4), 3.7)), [label])
        assert abs(float(loss.data) - math.log(4)) < 1e-6


def test_saturated_cross_entropy():
    logits = np.zeros((1, 4))
    logits[0, 2] = 30.0
    assert float(cross_entropy_logits(Tensor(logits), [2]).data) < 1e-9


def test_cross_entropy_scalar_oracle():
    z = [2.0, 1.0, 0.5, -1.0]
    expected = -math.log(math.exp(2.0) / sum(math.exp(v) for v in z))
    got = float(cross_entropy_logits(Tensor(np.array([z])), [0]).data)
    assert abs(got - expected) < 1e-6


def test_cross_entropy_large_logits_stay_finite():
    loss = cross_entropy_logits(Tensor(np.array([[1000.0, -1000.0, 0.0, 0.0]])), [1])
    assert abs(float(loss.data) - 2000.0) < 1e-2


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        logits = Tensor(rng.standard_normal((n, 4)).astype(DTYPE) * 3, requires_grad=True)
        labels = rng.integers(0, 4, size=n)
        backward(cross_entropy_logits(logits, labels))
        expected = (softmax(logits.data) - np.eye(4)[labels]) / n
        np.testing.assert_allclose(logits.grad, expected, atol=1e-5)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy_logits(Tensor(np.zeros((2, 4))), [0, 4])
    with pytest.raises(ValueError):
        cross_entropy_logits(Tensor(np.zeros((2, 4))), [-1, 0])
    with pytest.raises(ShapeError):
        cross_entropy_logits(Tensor(np.zeros((2, 4))), [0])


def test_bce_zero_logits_give_ln2():
    target = (np.random.default_rng(1).random((2, 3, 4, 4)) < 0.5).astype(DTYPE)
    assert abs(float(bce_with_logits(Tensor(np.zeros((2, 3, 4, 4))), target).data) - math.log(2)) < 1e-6


def test_bce_saturated():
    assert float(bce_with_logits(Tensor(np.full((1, 1, 2, 2), 30.0)), np.ones((1, 1, 2, 2))).data) < 1e-9


def test_bce_per_pixel_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 1, 2, 2)) * 3
    p = (rng.random((1, 1, 2, 2)) < 0.5).astype(float)
    terms = []
    for xi, pi in zip(x.ravel(), p.ravel()):
        s = 1.0 / (1.0 + math.exp(-xi))
        terms.append(-(pi * math.log(s) + (1 - pi) * math.log(1 - s)))
    got = float(bce_with_logits(Tensor(x.astype(DTYPE)), p).data)
    assert abs(got - sum(terms) / 4) < 1e-6


def test_bce_tiling_invariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 4)).astype(DTYPE)
    p = (rng.random((2, 3, 4, 4)) < 0.3).astype(DTYPE)
    tile = lambda a: np.tile(a, (1, 1, 2, 2))
    a = float(bce_with_logits(Tensor(x), p).data)
    b = float(bce_with_logits(Tensor(tile(x)), tile(p)).data)
    assert abs(a - b) < 1e-7


def test_bce_rejects_bad_targets():
    with pytest.raises(ValueError):
        bce_with_logits(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ShapeError):
        bce_with_logits(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


def test_total_loss_lambda_one_is_plain_sum():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = (DTYPE(v) for v in rng.standard_normal(2))
        got = total_loss(Tensor(a), Tensor(b), LossConfig(1.0)).data
        assert got == a + b


def test_total_loss_example():
    got = float(total_loss(Tensor(1.0), Tensor(0.4), LossConfig(0.5)).data)
    assert abs(got - 1.2) < 1e-7


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_linear_in_lambda(l_cls, l_seg, lam1, lam2):
    f = lambda lam: float(total_loss(Tensor(l_cls), Tensor(l_seg), LossConfig(lam)).data)
    # f(lam) - f(0) is proportional to lam
    assert abs((f(lam1) - f(0)) * lam2 - (f(lam2) - f(0)) * lam1) <= 1e-4 * (1 + abs(l_seg) * lam1 * lam2)


def test_total_loss_gradients_scale_with_lambda():
    a, b = Tensor(1.0, requires_grad=True), Tensor(2.0, requires_grad=True)
    backward(total_loss(a, b, LossConfig(0.25)))
    assert float(a.grad) == 1.0 and float(b.grad) == 0.25


def test_total_loss_lambda_zero_sends_no_gradient():
    a, b = Tensor(1.0, requires_grad=True), Tensor(2.0, requires_grad=True)
    backward(total_loss(a, b, LossConfig(0.0)))
    assert float(b.grad) == 0.0


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        total_loss(Tensor(1.0), Tensor(np.nan), LossConfig())
    with pytest.raises(ValueError):
        LossConfig(-0.1)
