"""Shared oracles and fixtures.

numeric_grad is the independent gradient oracle: central finite differences
with h = 1e-3, evaluated on float64 graphs so the difference quotient itself
is trustworthy at the tolerances the analytic gradients are held to.
"""

import numpy as np
import pytest


def numeric_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar-valued f() w.r.t. array x.

    f must read x by reference (we mutate entries in place).
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        f_plus = f()
        x[idx] = orig - h
        f_minus = f()
        x[idx] = orig
        g[idx] = (f_plus - f_minus) / (2.0 * h)
    return g


def rel_err(a, b):
    """Norm-relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)
