"""Central finite differences, kept apart from the analytic backward code."""
import numpy as np

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-6


def numeric_grad(f, arr, step=STEP):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        up = f()
        arr[idx] = old - step
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, name=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    bound = RTOL * (np.abs(analytic) + np.abs(numeric)) + ATOL
    bad = np.abs(analytic - numeric) > bound
    assert not bad.any(), (
        f"{name}: {bad.sum()} of {bad.size} entries off; worst "
        f"{np.max(np.abs(analytic - numeric) - bound):.3e}")
