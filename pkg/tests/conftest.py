"""Shared oracles and fixtures.

The gradient oracle here is deliberately independent of the tape: it
re-evaluates a forward closure under central finite differences and never
touches backward rules.
"""

import numpy as np
import pytest


def numeric_gradient(f, arr, h=1e-5):
    """Central finite differences of the scalar f() w.r.t. arr, in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def numeric_gradient_sampled(f, arr, indices, h=1e-5):
    """Finite differences at a subset of flat indices; returns (indices, grads)."""
    flat = arr.ravel()
    vals = np.zeros(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        vals[n] = (fp - fm) / (2.0 * h)
    return vals


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    """Max relative error below rtol (atol guards zero-gradient entries)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    err = np.abs(analytic - numeric) / denom
    assert err.max() < rtol, (
        f"{label}: max relative gradient error {err.max():.3e} >= {rtol:g} "
        f"(analytic {analytic.ravel()[err.argmax()]:.6e} vs "
        f"numeric {numeric.ravel()[err.argmax()]:.6e})"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
