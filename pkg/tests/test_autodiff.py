"""Gradient engine checks: exactness against central finite differences."""

import numpy as np
import pytest

from rlshield import autodiff as ad
from rlshield.autodiff import GradientUsageError, Tensor


def finite_diff(f, params, eps=1e-5):
    """Central finite differences of a scalar function of Tensor params."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            g.ravel()[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_sum_of_squares_gradient_is_two_x():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    loss = ad.tsum(ad.square(x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_constant_loss_has_zero_gradients():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ad.tsum(ad.mul(x, 0.0))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_backward_requires_recorded_forward():
    leaf = Tensor(np.array(3.0), requires_grad=True)
    with pytest.raises(GradientUsageError):
        ad.backward(leaf)


def test_backward_requires_scalar():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.mul(x, 2.0)
    with pytest.raises(GradientUsageError):
        ad.backward(y)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = ad.tsum(ad.add(ad.mul(x, 3.0), ad.mul(x, x)))  # 3x + x^2 -> 3 + 2x = 7
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])


def test_matmul_vector_and_matrix_cases():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    v = Tensor(rng.normal(size=3), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

    loss = ad.tsum(ad.square(ad.matmul(v, w)))
    ad.backward(loss)
    fd = finite_diff(lambda: float(np.sum((v.data @ w.data) ** 2)), [v, w])
    assert rel_err(v.grad, fd[0]).max() < 1e-6
    assert rel_err(w.grad, fd[1]).max() < 1e-6

    w.zero_grad()
    loss2 = ad.tsum(ad.square(ad.matmul(m, w)))
    ad.backward(loss2)
    fd2 = finite_diff(lambda: float(np.sum((m.data @ w.data) ** 2)), [m, w])
    assert rel_err(m.grad, fd2[0]).max() < 1e-6
    assert rel_err(w.grad, fd2[1]).max() < 1e-6


def test_broadcast_bias_gradient_sums_rows():
    x = Tensor(np.ones((4, 3)))
    b = Tensor(np.zeros(3), requires_grad=True)
    loss = ad.tsum(ad.add(x, b))
    ad.backward(loss)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_log_softmax_rows_matches_manual():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    out = ad.log_softmax_rows(Tensor(x)).data
    manual = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(out, manual, atol=1e-12)


def test_gather_rows_forward_and_backward():
    x = Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
    idx = np.array([1, 0, 3])
    picked = ad.gather_rows(x, idx)
    np.testing.assert_array_equal(picked.data, [1.0, 4.0, 11.0])
    ad.backward(ad.tsum(picked))
    expected = np.zeros((3, 4))
    expected[[0, 1, 2], idx] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_composite_network_loss_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = Tensor(rng.normal(scale=0.5, size=(4, 5)), requires_grad=True)
    b1 = Tensor(rng.normal(scale=0.1, size=5), requires_grad=True)
    w2 = Tensor(rng.normal(scale=0.5, size=(5, 3)), requires_grad=True)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))

    def forward():
        h = ad.tanh(ad.add(ad.matmul(Tensor(x), w1), b1))
        out = ad.matmul(h, w2)
        logp = ad.log_softmax_rows(out)
        p = ad.exp(logp)
        ent = ad.tmean(ad.mul(ad.tsum(ad.mul(p, logp), axis=1), -1.0))
        mse = ad.tmean(ad.square(ad.sub(out, Tensor(target))))
        return ad.add(mse, ad.mul(ent, 0.3))

    loss = forward()
    ad.backward(loss)
    fd = finite_diff(lambda: float(forward().data), [w1, b1, w2])
    for p, g in zip([w1, b1, w2], fd):
        assert rel_err(p.grad, g).max() < 1e-4


def test_purity_same_inputs_same_outputs():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = rng.normal(size=3)
    a = ad.tanh(ad.matmul(Tensor(x), w)).data
    b = ad.tanh(ad.matmul(Tensor(x), w)).data
    np.testing.assert_array_equal(a, b)
