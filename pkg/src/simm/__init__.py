"""Simultaneous inference for misaligned multivariate functional data."""

from .covariance import (
    BrownianBridge,
    BrownianMotion,
    CrossCovAnchors,
    DiagonalAmplitude,
    DynamicAmplitude,
    Matern,
    Mixture,
    NoiseModel,
    Product,
    assemble_block_cov,
    cross_cov_eval,
    decode_params,
    encode_params,
    interp_sqrt,
    kernel_eval,
)
from .estimation import (
    FitOptions,
    FittedModel,
    aligned_values,
    cross_sectional_variance,
    em_update_coefficients,
    estimate_variance,
    fit,
    fit_fixed_effects_gls,
    predict_warp,
    scale_variances,
)
from .likelihood import (
    Linearization,
    conditional_warp_moments,
    linearize,
    linearized_nll,
    neg_log_posterior,
    profile_nll,
)
from .model import DataSet, FunctionalSample, ModelSpec
from .splines import SplineBasis, basis_deriv, basis_eval, monotone_cubic
from .warp import LatentWarp, WarpCovariance, WarpModel, simulate_warps, warp_eval, warp_grad

__version__ = "0.1.0"
