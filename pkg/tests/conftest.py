import numpy as np
import pytest

from warpstat import autodiff as ad


def finite_diff(f, x, step=1e-5):
    """Central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        gf[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-6):
    """Per-coordinate check |a - n| <= atol + rtol * max(|a|, |n|).

    The absolute floor absorbs the rounding noise of central differences on
    coordinates whose true gradient is ~0.
    """
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > atol + rtol * scale
    assert not bad.any(), (
        f"gradient mismatch at {np.where(bad)[0][:10]}: "
        f"analytic={analytic[bad][:5]} numeric={numeric[bad][:5]}"
    )


def check_loss_gradient(build_loss, u0, step=1e-5, rtol=1e-5, atol=1e-6):
    """build_loss: flat unconstrained array -> scalar Node. Checks ad.grad vs FD."""
    u0 = np.asarray(u0, dtype=np.float64)
    leaf = ad.constant(u0)
    loss = build_loss(leaf)
    (g,) = ad.grad(loss, [leaf])

    def f(u):
        return build_loss(ad.constant(u)).item()

    fd = finite_diff(f, u0, step=step)
    assert_grads_close(g, fd, rtol=rtol, atol=atol)
    return g, fd


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
