import numpy as np
import pytest

from warpstat import autodiff as ad

from conftest import assert_grads_close, finite_diff


def _fd_check(expr, x0, step=1e-6, rtol=1e-6, atol=1e-8):
    """expr: Node -> scalar Node, x0: ndarray leaf value."""
    leaf = ad.constant(x0)
    out = expr(leaf)
    (g,) = ad.grad(out, [leaf])
    fd = finite_diff(lambda x: expr(ad.constant(x)).item(), x0, step=step)
    assert_grads_close(g, fd, rtol=rtol, atol=atol)


def test_elementwise_ops(rng):
    x0 = rng.uniform(0.5, 2.0, size=(3, 4))
    _fd_check(lambda x: ad.sum_(ad.exp(x) + ad.log(x) * 2.0 - x / 3.0), x0)
    _fd_check(lambda x: ad.sum_(ad.sqrt(x) * ad.tanh(x)), x0)
    _fd_check(lambda x: ad.sum_(ad.square(x) - x**3), x0)
    _fd_check(lambda x: ad.sum_(ad.sigmoid(x) + ad.erf(x)), x0)
    _fd_check(lambda x: ad.sum_(ad.softplus(x * 3.0)), x0)
    _fd_check(lambda x: ad.sum_(ad.absval(x - 1.2)), x0)
    _fd_check(lambda x: ad.sum_(ad.norm_cdf(x) + ad.norm_pdf(x)), x0)


def test_broadcasting_backward(rng):
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4,))

    leaf_a, leaf_b = ad.constant(a0), ad.constant(b0)
    out = ad.sum_(ad.square(leaf_a * leaf_b + leaf_b))
    ga, gb = ad.grad(out, [leaf_a, leaf_b])
    assert ga.shape == a0.shape and gb.shape == b0.shape

    fd_b = finite_diff(
        lambda b: ad.sum_(ad.square(leaf_a * ad.constant(b) + ad.constant(b))).item(),
        b0,
    )
    assert_grads_close(gb, fd_b)


def test_reductions_and_indexing(rng):
    x0 = rng.normal(size=(5, 3))
    _fd_check(lambda x: ad.max_(x) + ad.min_(x), x0)
    _fd_check(lambda x: ad.sum_(ad.max_(x, axis=0)) - ad.sum_(ad.min_(x, axis=1)), x0)
    _fd_check(lambda x: ad.sum_(x[1:4, :2]) + ad.sum_(ad.gather_rows(x, np.array([0, 0, 4]))), x0)
    _fd_check(lambda x: ad.sum_(ad.concat([x, 2.0 * x], axis=1)), x0)
    _fd_check(lambda x: ad.sum_(ad.stack([x[0], x[2]], axis=0) * 1.5), x0)


def test_where_routes_gradient(rng):
    x0 = rng.normal(size=(6,))
    mask = x0 > 0
    leaf = ad.constant(x0)
    out = ad.sum_(ad.where(mask, ad.square(leaf), 3.0 * leaf))
    (g,) = ad.grad(out, [leaf])
    expected = np.where(mask, 2 * x0, 3.0)
    assert np.allclose(g, expected)


def test_matmul_2d_and_batched(rng):
    a0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=(3, 5))
    _fd_check(lambda a: ad.sum_(ad.square(a @ ad.constant(b0))), a0)
    _fd_check(lambda b: ad.sum_(ad.square(ad.constant(a0) @ b)), b0)

    # batched
    a0 = rng.normal(size=(6, 4, 3))
    b0 = rng.normal(size=(6, 3, 2))
    _fd_check(lambda a: ad.sum_(ad.square(a @ ad.constant(b0))), a0)
    _fd_check(lambda b: ad.sum_(ad.square(ad.constant(a0) @ b)), b0)


def _random_spd(rng, m, batch=()):
    A = rng.normal(size=batch + (m, m))
    return A @ np.swapaxes(A, -1, -2) + 3.0 * np.eye(m)


def test_cholesky_logdet_gradient(rng):
    S0 = _random_spd(rng, 5)
    _fd_check(
        lambda S: ad.logdet_chol(ad.cholesky(0.5 * (S + ad.transpose(S)))),
        S0,
        step=1e-6,
        rtol=1e-5,
        atol=1e-7,
    )
    # oracle: d logdet / dS = inv(S) for symmetric-symmetrized input
    leaf = ad.constant(S0)
    out = ad.logdet_chol(ad.cholesky(0.5 * (leaf + ad.transpose(leaf))))
    (g,) = ad.grad(out, [leaf])
    assert np.allclose(g, np.linalg.inv(S0), rtol=1e-9, atol=1e-10)


def test_cholesky_batched_gradient(rng):
    S0 = _random_spd(rng, 3, batch=(4,))
    _fd_check(
        lambda S: ad.sum_(ad.logdet_chol(ad.cholesky(0.5 * (S + ad.transpose(S))))),
        S0,
        step=1e-6,
        rtol=1e-5,
        atol=1e-7,
    )


def test_solve_triangular_gradient(rng):
    S0 = _random_spd(rng, 4)
    B0 = rng.normal(size=(4, 2))

    def quad(S):
        L = ad.cholesky(0.5 * (S + ad.transpose(S)))
        X = ad.solve_triangular(L, ad.constant(B0))
        return ad.sum_(ad.square(X))

    _fd_check(quad, S0, step=1e-6, rtol=1e-5, atol=1e-7)

    def quad_t(S):
        L = ad.cholesky(0.5 * (S + ad.transpose(S)))
        X = ad.solve_triangular(L, ad.constant(B0))
        Y = ad.solve_triangular(L, X, trans=True)
        return ad.sum_(ad.constant(B0) * Y)

    # full quadratic form B' S^{-1} B: gradient oracle -S^{-1} B B' S^{-1}
    leaf = ad.constant(S0)
    out = quad_t(leaf)
    (g,) = ad.grad(out, [leaf])
    Sinv = np.linalg.inv(S0)
    oracle = -Sinv @ B0 @ B0.T @ Sinv
    oracle = 0.5 * (oracle + oracle.T)
    assert_grads_close(g, oracle, rtol=1e-8, atol=1e-10)


def test_solve_triangular_batched(rng):
    S0 = _random_spd(rng, 3, batch=(5,))
    B0 = rng.normal(size=(5, 3, 1))

    def nll(S):
        Ssym = 0.5 * (S + ad.transpose(S))
        L = ad.cholesky(Ssym)
        X = ad.solve_triangular(L, ad.constant(B0))
        return ad.sum_(ad.square(X)) + ad.sum_(ad.logdet_chol(L))

    _fd_check(nll, S0, step=1e-6, rtol=1e-5, atol=1e-7)


def test_powxy(rng):
    h0 = rng.uniform(0.5, 2.0, size=(4,))
    k0 = np.array(1.3)
    leaf_h, leaf_k = ad.constant(h0), ad.constant(k0)
    out = ad.sum_(ad.powxy(leaf_h, leaf_k))
    gh, gk = ad.grad(out, [leaf_h, leaf_k])
    assert_grads_close(gh, k0 * h0 ** (k0 - 1.0), rtol=1e-10, atol=1e-12)
    assert_grads_close(gk, np.sum(h0**k0 * np.log(h0)), rtol=1e-10, atol=1e-12)


def test_grad_of_quadratic_is_identity(rng):
    p0 = rng.normal(size=(7,))
    leaf = ad.constant(p0)
    loss = 0.5 * ad.sum_(ad.square(leaf))
    (g,) = ad.grad(loss, [leaf])
    assert np.allclose(g, p0)


def test_constant_loss_zero_gradient():
    leaf = ad.constant(np.ones(3))
    loss = ad.sum_(leaf * 0.0) + 5.0
    (g,) = ad.grad(loss, [leaf])
    assert np.allclose(g, 0.0)


def test_unreachable_leaf_zero_gradient():
    a = ad.constant(np.ones(2))
    b = ad.constant(np.ones(2))
    loss = ad.sum_(ad.square(a))
    ga, gb = ad.grad(loss, [a, b])
    assert np.allclose(ga, 2.0) and np.allclose(gb, 0.0)


def test_grad_requires_scalar():
    a = ad.constant(np.ones(3))
    with pytest.raises(ad.UnsupportedPrimitiveError):
        ad.grad(a, [a])


def test_unsupported_primitive_errors():
    a = ad.constant(np.ones(3))
    with pytest.raises(ad.UnsupportedPrimitiveError):
        a ** a  # node exponent requires powxy
    with pytest.raises(ad.UnsupportedPrimitiveError):
        ad.as_node({"not": "an array"})


def test_nonfinite_diagnostic_names_op():
    a = ad.constant(np.array(-1.0))
    out = ad.log(a) * 2.0
    with pytest.raises(ad.NonFiniteError) as err:
        ad.check_finite(out)
    assert "log" in str(err.value)


def test_grad_accumulates_over_reuse(rng):
    x0 = rng.normal(size=(3,))
    leaf = ad.constant(x0)
    y = ad.exp(leaf)
    loss = ad.sum_(y * y) + ad.sum_(y)
    (g,) = ad.grad(loss, [leaf])
    fd = finite_diff(
        lambda x: (np.sum(np.exp(x) ** 2) + np.sum(np.exp(x))), x0, step=1e-6
    )
    assert_grads_close(g, fd, rtol=1e-6)
