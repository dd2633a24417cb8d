"""Backward-pass contract: scalar-only, single-shot tapes, linearity, NaN guard."""

import numpy as np
import pytest

from dploda import tensor as T


def test_grad_of_weighted_sum_is_input():
    rng = np.random.default_rng(0)
    xv = rng.standard_normal((3, 4)).astype(np.float32)
    x = T.tensor(xv)
    w = T.tensor(np.ones((3, 4)), requires_grad=True)
    (w * x).sum().backward()
    np.testing.assert_allclose(w.grad, xv, rtol=1e-6)


def test_mse_against_itself_has_zero_grads():
    x = T.tensor(np.random.default_rng(1).standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
    T.mse_loss(x, x).backward()
    np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))


def test_non_scalar_loss_rejected():
    x = T.tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(T.GradientError, match="scalar"):
        (x * 2.0).backward()


def test_double_backward_rejected():
    x = T.tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(T.GradientError, match="already"):
        loss.backward()


def test_backward_without_tape_rejected():
    loss = T.tensor(1.0)
    with pytest.raises(T.GradientError, match="tape"):
        loss.backward()


def test_gradient_linearity():
    rng = np.random.default_rng(5)
    xv = rng.standard_normal((4, 4))

    def grad_of(a, b):
        x = T.tensor(xv, requires_grad=True, dtype=np.float64)
        l1 = (x * x).mean()
        l2 = T.silu(x).sum()
        (l1 * a + l2 * b).backward()
        return x.grad

    g = grad_of(2.0, -3.0)
    ga = grad_of(1.0, 0.0)
    gb = grad_of(0.0, 1.0)
    np.testing.assert_allclose(g, 2.0 * ga - 3.0 * gb, atol=1e-6)


def test_nan_in_gradient_fails_loudly():
    x = T.tensor(np.ones(3), requires_grad=True)
    bad = T.tensor(np.array([np.nan, 1.0, 1.0], dtype=np.float32))
    loss = (x * bad).sum()
    with pytest.raises(T.GradientError, match="non-finite"):
        loss.backward()


def test_grad_accumulates_across_tapes_until_zeroed():
    x = T.tensor(np.ones(2), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_suppresses_tape():
    x = T.tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    with pytest.raises(T.GradientError):
        y.backward()


def test_ops_preserve_dtype():
    x64 = T.tensor(np.ones((1, 2, 4, 4)), dtype=np.float64)
    w64 = T.tensor(np.ones((2, 2, 3, 3)), dtype=np.float64)
    assert T.conv2d(x64, w64, padding=1).data.dtype == np.float64
    x32 = T.tensor(np.ones(4))
    assert T.silu(x32).data.dtype == np.float32
    assert (x32 * 0.5).data.dtype == np.float32
