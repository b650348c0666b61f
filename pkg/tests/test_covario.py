import numpy as np
import pytest

from warpstat import autodiff as ad
from warpstat.covario import (
    CovParams,
    CrossCovParams,
    StParams,
    VarioParams,
    cov_iso,
    cross_cov,
    cross_cov_matrix,
    nonstat_cov_matrix,
    nonstat_vario,
    nonstat_vario_matrix,
    pairwise_dists,
    st_sep_cov,
    vario_power,
)
from warpstat.errors import ConfigurationError
from warpstat.warp import WarpStack, default_layers

from test_warp import random_admissible_stack


def _value(x):
    return x.value if isinstance(x, ad.Node) else x


# --- isotropic kernels -------------------------------------------------------


def test_cov_iso_zero_distance_is_variance():
    for fam in ("exponential", "matern32"):
        assert _value(cov_iso(fam, 0.0, 2.5, 0.7)) == pytest.approx(2.5)


def test_cov_iso_exponential_oracle():
    assert _value(cov_iso("exponential", 1.0, 1.0, 1.0)) == pytest.approx(
        0.36787944117144233, rel=1e-15
    )


def test_cov_iso_matern32_oracle():
    assert _value(cov_iso("matern32", 0.9, 1.3, 0.7)) == pytest.approx(
        0.45247203629048952, rel=1e-14
    )


def test_cov_iso_monotone_decay_to_zero():
    h = np.linspace(0, 60, 400)
    for fam in ("exponential", "matern32"):
        c = _value(cov_iso(fam, h, 1.0, 1.0))
        assert np.all(np.diff(c) < 0)
        assert c[-1] < 1e-10


def test_cov_iso_rejects_negative_distance():
    with pytest.raises(ConfigurationError):
        cov_iso("exponential", -0.1, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        cov_iso("cauchy", 1.0, 1.0, 1.0)


def test_vario_power_values():
    assert _value(vario_power(0.0, 1.0, 1.3)) == 0.0
    assert _value(vario_power(2.0, 1.0, 1.0)) == pytest.approx(2.0)
    assert _value(vario_power(0.7, 0.5, 1.5)) == pytest.approx(
        1.6565023392678925, rel=1e-14
    )
    with pytest.raises(ConfigurationError):
        vario_power(-1.0, 1.0, 1.0)


def test_vario_power_scaling_property(rng):
    # gamma(range * x) = x^smoothness for all x >= 0
    for _ in range(10):
        phi = rng.uniform(0.2, 2.0)
        kappa = rng.uniform(0.1, 2.0)
        x = rng.uniform(0, 5.0, size=20)
        got = _value(vario_power(phi * x, phi, kappa))
        assert np.allclose(got, x**kappa, rtol=1e-12)


def test_vario_params_validation():
    with pytest.raises(ConfigurationError):
        VarioParams(range_=1.0, smoothness=2.5)
    with pytest.raises(ConfigurationError):
        VarioParams(range_=-1.0, smoothness=1.0)
    VarioParams(range_=0.3, smoothness=2.0)  # boundary allowed


# --- warped lifts ------------------------------------------------------------


def test_identity_stack_reduces_to_stationary(rng):
    S = rng.uniform(-0.5, 0.5, size=(12, 2))
    stack = WarpStack([], input_dim=2)
    params = CovParams(1.7, 0.4, "exponential")
    C = nonstat_cov_matrix(stack, params, S)
    D = np.sqrt(((S[:, None, :] - S[None, :, :]) ** 2).sum(-1))
    assert np.allclose(C.value, 1.7 * np.exp(-D / 0.4), atol=1e-12)

    vp = VarioParams(0.6, 1.2)
    G = nonstat_vario_matrix(stack, vp, S)
    assert np.allclose(G.value, (D / 0.6) ** 1.2, atol=1e-12)
    assert np.all(np.diag(G.value) == 0)


def test_single_point_value_is_variance():
    stack = WarpStack([], input_dim=2)
    params = CovParams(3.3, 0.5)
    C = nonstat_cov_matrix(stack, params, np.array([[0.1, -0.2]]))
    assert C.value[0, 0] == pytest.approx(3.3)


def test_warp_metric_consistency(rng):
    """Compositional identity: cov matrix == kernel applied to warped distances."""
    stack = random_admissible_stack(rng)
    S = rng.uniform(-0.5, 0.5, size=(15, 2))
    S[0] = [-0.5, -0.5]
    S[1] = [0.5, 0.5]
    params = CovParams(1.2, 0.35, "matern32")
    C = nonstat_cov_matrix(stack, params, S)
    W, _ = stack.forward(S)
    D = np.sqrt(((W.value[:, None, :] - W.value[None, :, :]) ** 2).sum(-1))
    s3 = np.sqrt(3.0) * D / 0.35
    assert np.allclose(C.value, 1.2 * (1 + s3) * np.exp(-s3), atol=1e-12)


def test_nonstat_cov_two_stage_oracle(rng):
    # 3 fixed points, one nontrivial axial unit: matrix matches the
    # stack-forward oracle composed with the scalar kernel oracle entrywise
    from warpstat.warp import AxialWarpUnit, awu_eval

    unit = AxialWarpUnit(dim=1, steepness=40.0, lims=(-0.5, 0.5),
                         centers=np.array([-0.1, 0.2]),
                         weights=np.array([1.0, 0.4, 0.2]))
    stack = WarpStack([unit], input_dim=2)
    S = np.array([[-0.5, -0.5], [0.1, 0.3], [0.5, 0.5]])
    params = CovParams(0.9, 0.25, "exponential")
    C = nonstat_cov_matrix(stack, params, S)

    col = awu_eval(unit, S[:, 0])
    mn, mx = col.min(), col.max()
    col = (col - mn) / (mx - mn) - 0.5
    W = np.column_stack([col, S[:, 1]])
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            h = np.linalg.norm(W[i] - W[j])
            expected[i, j] = 0.9 * np.exp(-h / 0.25)
    assert np.allclose(C.value, expected, atol=1e-12)


def test_nonstat_vario_zero_at_same_site(rng):
    stack = random_admissible_stack(rng)
    vp = VarioParams(0.3, 1.4)
    s = np.array([0.2, -0.4])
    # same site through the scalar interface: distance 0 -> gamma 0
    assert _value(nonstat_vario(stack, vp, s, s)) == 0.0


def test_symmetry_and_psd(rng):
    for fam in ("exponential", "matern32"):
        for trial in range(3):
            stack = random_admissible_stack(rng)
            S = rng.uniform(-0.5, 0.5, size=(30, 2))
            S[0] = [-0.5, -0.5]
            S[1] = [0.5, 0.5]
            sigma2 = rng.uniform(0.5, 2.0)
            params = CovParams(sigma2, rng.uniform(0.1, 1.0), fam)
            C = nonstat_cov_matrix(stack, params, S).value
            assert np.allclose(C, C.T, atol=1e-12)
            lam = np.linalg.eigvalsh(C)
            assert lam.min() >= -1e-8 * sigma2


def test_gradients_flow_through_cov_matrix(rng):
    from conftest import assert_grads_close, finite_diff

    stack = random_admissible_stack(rng, r=4)
    groups = stack.param_groups()
    S = rng.uniform(-0.5, 0.5, size=(10, 2))
    S[0] = [-0.5, -0.5]
    S[1] = [0.5, 0.5]
    u0 = np.concatenate([g.transform.invert(u.weights)
                         for g, u in zip(groups, stack.units)])
    u0 = np.concatenate([u0, [np.log(1.3), np.log(0.4)]])
    sizes = [g.init_unconstrained.size for g in groups] + [1, 1]
    splits = np.cumsum(sizes)[:-1]
    probe = rng.normal(size=(10, 10))

    def build(uflat):
        parts = np.split(np.asarray(uflat), splits)
        leaves = [ad.constant(p) for p in parts]
        weights = [g.transform.apply(leaf) for g, leaf in zip(groups, leaves)]
        var = ad.exp(leaves[-2])[0]
        ell = ad.exp(leaves[-1])[0]
        C = nonstat_cov_matrix(stack, CovParams(), S, weights=weights,
                               variance=var, lengthscale=ell)
        return ad.sum_(C * probe), leaves

    loss, leaves = build(u0)
    g = np.concatenate([x.ravel() for x in ad.grad(loss, leaves)])
    fd = finite_diff(lambda u: build(u)[0].item(), u0, step=1e-5)
    assert_grads_close(g, fd, rtol=1e-5, atol=1e-7)


# --- spatio-temporal and bivariate ------------------------------------------


def test_st_sep_cov_same_point_product_of_variances():
    sp = WarpStack([], input_dim=2)
    tp = WarpStack([], input_dim=1)
    st = StParams(CovParams(1.5, 0.3), CovParams(2.0, 0.8))
    c = st_sep_cov(sp, tp, st, [0.1, 0.2], 0.4, [0.1, 0.2], 0.4)
    assert _value(c) == pytest.approx(1.5 * 2.0)


def test_st_sep_cov_identity_stacks_product_form(rng):
    sp = WarpStack([], input_dim=2)
    tp = WarpStack([], input_dim=1)
    st = StParams(CovParams(1.2, 0.5), CovParams(1.0, 2.0))
    s1, s2 = rng.uniform(-0.5, 0.5, size=(2, 2))
    t1, t2 = 0.1, -0.3
    c = st_sep_cov(sp, tp, st, s1, t1, s2, t2)
    hs = np.linalg.norm(s1 - s2)
    ht = abs(t1 - t2)
    expected = 1.2 * np.exp(-hs / 0.5) * 1.0 * np.exp(-ht / 2.0)
    assert _value(c) == pytest.approx(expected, rel=1e-12)


def test_st_sep_cov_warped_axis_product_oracle():
    from warpstat.warp import AxialWarpUnit, awu_eval

    unit = AxialWarpUnit(dim=1, steepness=25.0, lims=(-0.5, 0.5),
                         centers=np.array([0.0]), weights=np.array([1.0, 0.5]))
    tp = WarpStack([], input_dim=1)
    sp = WarpStack([unit], input_dim=2)
    st = StParams(CovParams(1.0, 0.4), CovParams(1.0, 1.5))
    s1, s2 = np.array([-0.5, 0.0]), np.array([0.5, 0.2])
    t1, t2 = -0.2, 0.3
    c = st_sep_cov(sp, tp, st, s1, t1, s2, t2)
    # hand-compose: warp axis 1 of both points, renormalize over {s1, s2}
    col = awu_eval(unit, np.array([s1[0], s2[0]]))
    mn, mx = col.min(), col.max()
    col = (col - mn) / (mx - mn) - 0.5
    w1 = np.array([col[0], s1[1]])
    w2 = np.array([col[1], s2[1]])
    expected = np.exp(-np.linalg.norm(w1 - w2) / 0.4) * np.exp(-abs(t1 - t2) / 1.5)
    assert _value(c) == pytest.approx(expected, rel=1e-12)


def test_cross_cov_within_process_variance():
    st1 = WarpStack([], input_dim=2)
    st2 = WarpStack([], input_dim=2)
    params = CrossCovParams(1.4, 2.2, 0.5, rho=0.3)
    s = [0.1, 0.1]
    assert _value(cross_cov(st1, st2, params, 1, 1, s, s)) == pytest.approx(1.4)
    assert _value(cross_cov(st1, st2, params, 2, 2, s, s)) == pytest.approx(2.2)
    with pytest.raises(ConfigurationError):
        cross_cov(st1, st2, params, 0, 1, s, s)


def test_cross_cov_zero_rho_kills_cross_terms(rng):
    st1 = WarpStack([], input_dim=2)
    st2 = WarpStack([], input_dim=2)
    params = CrossCovParams(1.0, 1.0, 0.5, rho=0.0)
    for _ in range(5):
        s1, s2 = rng.uniform(-0.5, 0.5, size=(2, 2))
        assert _value(cross_cov(st1, st2, params, 1, 2, s1, s2)) == 0.0


def test_cross_cov_product_oracle(rng):
    st1 = WarpStack([], input_dim=2)
    st2 = WarpStack([], input_dim=2)
    params = CrossCovParams(1.5, 0.8, 0.5, rho=0.5)
    s1, s2 = np.array([0.0, 0.1]), np.array([0.3, -0.2])
    h = np.linalg.norm(s1 - s2)
    expected = 0.5 * np.sqrt(1.5 * 0.8) * np.exp(-h / 0.5)
    assert _value(cross_cov(st1, st2, params, 1, 2, s1, s2)) == pytest.approx(
        expected, rel=1e-12
    )


def test_bivariate_joint_psd(rng):
    st1 = WarpStack([], input_dim=2)
    st2 = WarpStack([], input_dim=2)
    for rho in (-0.95, -0.4, 0.0, 0.6, 0.95):
        params = CrossCovParams(1.1, 0.7, 0.4, rho=rho)
        S1 = rng.uniform(-0.5, 0.5, size=(12, 2))
        S2 = rng.uniform(-0.5, 0.5, size=(9, 2))
        C, _ = cross_cov_matrix(st1, st2, params, S1, S2)
        lam = np.linalg.eigvalsh(C.value)
        assert lam.min() >= -1e-10


def test_cross_cov_params_validation():
    with pytest.raises(ConfigurationError):
        CrossCovParams(rho=1.0)
    with pytest.raises(ConfigurationError):
        CrossCovParams(variance1=-1.0)
    p = CrossCovParams(1.0, 2.0, 0.5, rho=0.2)
    assert p.params_for(2).variance == 2.0


def test_pairwise_dists_zero_diag(rng):
    W = rng.normal(size=(8, 2))
    D = pairwise_dists(ad.constant(W))
    assert np.all(np.diag(D.value) == 0.0)
    off = D.value[np.triu_indices(8, 1)]
    expected = np.sqrt(((W[:, None] - W[None]) ** 2).sum(-1))[np.triu_indices(8, 1)]
    assert np.allclose(off, expected, atol=1e-12)
