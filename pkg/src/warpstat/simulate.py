"""Synthetic data generators for demos, benchmarks, and acceptance tests.

Three generators: a nonstationary Gaussian field built from a fixed axial +
radial truth warp, a stationary Gaussian field, and approximate
Brown-Resnick max-stable fields. Ground-truth parameters are returned
alongside the data so a sidecar file can document them.
"""

import numpy as np

from .covario import CovParams, VarioParams, nonstat_cov_matrix
from .errors import ConfigurationError
from .extremes import br_simulate_approx
from .warp import AxialWarpUnit, MobiusUnit, RbfBlockUnit, WarpStack

TRUTH_SIGMA2 = 1.0
TRUTH_LENGTHSCALE = 0.15


def truth_warp():
    """The fixed nontrivial warp behind the AWU_RBF_2D generator.

    Strong sigmoid compressions on both axes plus a radial bump: strong
    enough that a stationary model on the raw coordinates is clearly
    misspecified, while staying bijective (nonnegative axial weights,
    radial weights inside the orientation bound).
    """
    awu1 = AxialWarpUnit.default(dim=1, r=4, steepness=30.0)
    awu1.weights = np.array([1.0, 2.4, 0.0, 1.2])
    awu2 = AxialWarpUnit.default(dim=2, r=4, steepness=30.0)
    awu2.weights = np.array([1.0, 0.0, 2.8, 0.0])
    rbf = RbfBlockUnit(res=1)
    w = np.zeros(9)
    w[4] = 0.22     # expand around the center
    w[2] = -0.18    # contract toward the (-0.5, +0.5) corner
    rbf.weights = w
    return WarpStack([awu1, awu2, rbf], input_dim=2)


def _grid_coords(ds):
    if not 0 < ds < 1:
        raise ConfigurationError("grid spacing must lie in (0, 1)")
    axis = np.arange(-0.5, 0.5 + ds / 2, ds)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _sample_sites(grid, n, rng):
    if n > grid.shape[0]:
        raise ConfigurationError(
            f"cannot sample {n} sites from a {grid.shape[0]}-point grid"
        )
    idx = rng.choice(grid.shape[0], size=n, replace=False)
    return grid[np.sort(idx)]


def _gp_draw(C, rng):
    n = C.shape[0]
    L = np.linalg.cholesky(C + 1e-10 * C[0, 0] * np.eye(n))
    return L @ rng.standard_normal(n)


def sim_awu_rbf_2d(n=6000, ds=0.01, sigma2y=0.01, seed=0):
    """Warped exponential GP sampled at n grid sites plus observation noise.

    Returns (table dict, truth dict). Coordinates live on the
    [-0.5, 0.5]^2 grid with spacing ds.
    """
    rng = np.random.default_rng(seed)
    grid = _grid_coords(ds)
    S = _sample_sites(grid, n, rng)
    stack = truth_warp()
    cov = CovParams(TRUTH_SIGMA2, TRUTH_LENGTHSCALE, "exponential")
    C = nonstat_cov_matrix(stack, cov, S).value
    y = _gp_draw(C, rng)
    z = y + np.sqrt(sigma2y) * rng.standard_normal(n) if sigma2y > 0 else y
    table = {"x": S[:, 0], "y": S[:, 1], "z": z}
    truth = {
        "type": "AWU_RBF_2D",
        "stack": stack.to_dict(),
        "variance": TRUTH_SIGMA2,
        "lengthscale": TRUTH_LENGTHSCALE,
        "family": "exponential",
        "sigma2y": sigma2y,
        "ds": ds,
        "n": n,
        "seed": seed,
    }
    return table, truth


def sim_stationary_gp(n=6000, ds=0.01, sigma2y=0.01, variance=1.0,
                      lengthscale=0.2, seed=0):
    """Stationary exponential GP on the unit box grid."""
    rng = np.random.default_rng(seed)
    grid = _grid_coords(ds)
    S = _sample_sites(grid, n, rng)
    cov = CovParams(variance, lengthscale, "exponential")
    C = nonstat_cov_matrix(WarpStack([], input_dim=2), cov, S).value
    y = _gp_draw(C, rng)
    z = y + np.sqrt(sigma2y) * rng.standard_normal(n) if sigma2y > 0 else y
    table = {"x": S[:, 0], "y": S[:, 1], "z": z}
    truth = {
        "type": "stationary_GP", "variance": variance,
        "lengthscale": lengthscale, "family": "exponential",
        "sigma2y": sigma2y, "ds": ds, "n": n, "seed": seed,
    }
    return table, truth


def sim_br_fields(sites=30, replicates=100, range_=0.5, smoothness=1.0,
                  n_spectral=1000, seed=0):
    """Approximate Brown-Resnick fields at uniformly sampled sites."""
    rng = np.random.default_rng(seed)
    S = rng.uniform(-0.5, 0.5, size=(int(sites), 2))
    vario = VarioParams(range_, smoothness)
    Z = br_simulate_approx(WarpStack([], input_dim=2), vario, S,
                           n_fields=int(replicates), n_spectral=int(n_spectral),
                           seed=seed + 1)
    table = {"x": S[:, 0], "y": S[:, 1]}
    for t in range(Z.shape[0]):
        table[f"z{t + 1}"] = Z[t]
    truth = {
        "type": "BR_approx", "range": range_, "smoothness": smoothness,
        "sites": int(sites), "replicates": int(replicates),
        "n_spectral": int(n_spectral), "seed": seed,
    }
    return table, truth


def simulate_from_config(config, seed=None):
    """Dispatch on config['type']; returns (table dict, truth dict)."""
    sim_type = config.get("type", "AWU_RBF_2D")
    seed = int(config.get("seed", 0)) if seed is None else seed
    if sim_type == "AWU_RBF_2D":
        return sim_awu_rbf_2d(
            n=int(config.get("n", 6000)), ds=float(config.get("ds", 0.01)),
            sigma2y=float(config.get("sigma2y", 0.01)), seed=seed,
        )
    if sim_type == "stationary_GP":
        return sim_stationary_gp(
            n=int(config.get("n", 6000)), ds=float(config.get("ds", 0.01)),
            sigma2y=float(config.get("sigma2y", 0.01)),
            variance=float(config.get("variance", 1.0)),
            lengthscale=float(config.get("lengthscale", 0.2)), seed=seed,
        )
    if sim_type == "BR_approx":
        return sim_br_fields(
            sites=config.get("sites", 30), replicates=config.get("replicates", 100),
            range_=float(config.get("range", 0.5)),
            smoothness=float(config.get("smoothness", 1.0)),
            n_spectral=config.get("n_spectral", 1000), seed=seed,
        )
    raise ConfigurationError(f"unknown simulation type {sim_type!r}")
