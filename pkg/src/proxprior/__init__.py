"""Bayesian inference on varying-dimensional parameter spaces via proximal maps.

A continuous pre-image prior is pushed through a proximal operator, placing
posterior mass directly on lower-dimensional sets (sparse vectors, affine
sets, low-rank matrices, feasible flows) while sampling stays in ordinary
Euclidean coordinates with HMC/NUTS.
"""

from .admm import (
    ADMMConfig,
    FlowNetwork,
    FlowProx,
    FusedL1,
    build_flow_constraint_matrix,
    first_difference_matrix,
    prox_flow,
    prox_fused_l1,
)
from .calibration import (
    DeformationCurve,
    build_curve,
    default_lambda_grid,
    estimate_deformation,
    lambda_from_omega,
    sample_lambda,
)
from .errors import (
    ChainFailureError,
    ConfigurationError,
    ConvergenceError,
    DegenerateOperatorError,
    DivergentTrajectoryError,
    InfeasibleConstraintError,
    InvalidInputError,
    NumericalError,
    ProxPriorError,
)
from .gradients import SPSAConfig, finite_diff_jacobian, log_posterior_grad, spsa_jacobian
from .inference import (
    HypothesisResult,
    balanced_lambda,
    bayes_factor_set_expansion,
    factor_count_posterior,
    summarize,
    trace_contraction,
)
from .models import (
    BlockPrior,
    GaussianPrior,
    InverseGammaLogVariance,
    Model,
    make_affine_mean_model,
    make_flow_factor_model,
    make_gaussian_mean_model,
    make_sparse_regression_model,
    read_flow_table,
    svd_warm_start,
    synthetic_flow_data,
    write_flow_table,
)
from .operators import (
    AffineConstraint,
    AffineProjection,
    BlockProx,
    GroupRowNorm,
    Identity,
    NuclearNorm,
    ProxOperator,
    QuadraticRidge,
    SetExpansion,
    SoftThreshold,
    hyperplane_projector,
    prox_affine_projection,
    prox_group_row,
    prox_nuclear,
    prox_objective,
    prox_set_expansion,
    prox_soft_threshold,
)
from .sampler import (
    Chain,
    HMCConfig,
    diagnostics,
    hmc_step,
    leapfrog,
    nuts_run,
    run_chains,
)

__version__ = "0.1.0"
