import numpy as np
import pytest

from stackrl import numcore as nc


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)


def fd_grads(store, loss_fn, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. every store entry.

    loss_fn must evaluate the loss from the store's *current* values.
    """
    out = {}
    for name, p in store.items():
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def assert_grads_close(analytic, numeric, tol=1e-4):
    for name, g in analytic.items():
        err = rel_err(g, numeric[name])
        assert err.max() < tol, f"{name}: max rel err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
