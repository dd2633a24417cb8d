"""Shared test oracles: central finite differences against tape gradients."""

import numpy as np

from dploda import tensor as T


def finite_diff_check(params, loss_fn, h=1e-3, tol=1e-3, max_coords=64, rng=None):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``params`` are float64 leaf tensors that ``loss_fn`` reads on every call
    (the graph is rebuilt per evaluation, so perturbing ``p.data`` in place is
    visible). Returns the worst relative error seen.

    Relative error uses max(|analytic|, |numeric|, 1e-2) as denominator, so
    the bound degrades to an absolute 1e-5 for near-zero gradients.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        assert p.data.dtype == np.float64, "finite-difference checks need float64 graphs"
        p.zero_grad()

    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter missing gradient after backward"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = gflat[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-2)
            worst = max(worst, rel)
            assert rel < tol, f"grad mismatch at coord {i}: fd={fd:.6g} analytic={an:.6g} rel={rel:.3g}"
    return worst


def rand_t(rng, shape, requires_grad=True, scale=1.0):
    """Float64 leaf tensor with standard-normal entries."""
    return T.tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)
