"""warpstat: nonstationary spatial modeling via deep coordinate warpings.

Bijective warping units compose into a deformation of the coordinate
domain; stationary covariance or semivariogram models on the warped domain
yield nonstationary Gaussian-process and extreme-value models, fitted by
reverse-mode gradients and Adam.
"""

from .covario import (
    CovParams,
    CrossCovParams,
    StParams,
    VarioParams,
    cov_iso,
    cross_cov,
    nonstat_cov_matrix,
    nonstat_vario,
    nonstat_vario_matrix,
    st_sep_cov,
    vario_power,
)
from .engine import FitConfig, adam_step, fit, grad
from .extremes import (
    ExceedanceDataset,
    ExtremesModelSpec,
    MaximaDataset,
    PairSet,
    br_log_intensity,
    br_simulate_approx,
    cep_chi,
    empirical_cep,
    empirical_ec,
    exponent_V,
    exponent_V_derivs,
    extremal_coefficient,
    frechet_standardize,
    gsm_loss,
    gsm_weight,
    pair_loglik,
    pcl_loss,
    risk_eval,
    rpl_loss,
    wls_loss,
)
from .gauss import (
    FrkStructure,
    GaussData,
    GaussModelSpec,
    NngpStructure,
    PredictionResult,
    bisquare_eval,
    build_frk,
    build_nngp,
    frk_loglik,
    gls_beta,
    nngp_loglik,
    predict_gp,
    reml_loglik,
    score_predictions,
)
from .model_io import FittedModel, load_model, save_model
from .params import LearnRates, ParamGroup, ParamVector
from .warp import (
    AxialWarpUnit,
    MobiusUnit,
    RbfBlockUnit,
    Rescaler,
    WarpStack,
    awu_eval,
    default_layers,
    fold_check,
    mobius_eval,
    rbf_eval,
    stack_forward,
)

__version__ = "0.1.0"
