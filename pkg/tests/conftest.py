"""Shared fixtures: an operator zoo and tiny model factories."""

import numpy as np
import pytest

from proxprior import (
    ADMMConfig,
    AffineConstraint,
    AffineProjection,
    FlowProx,
    FusedL1,
    GaussianPrior,
    GroupRowNorm,
    Identity,
    Model,
    NuclearNorm,
    SetExpansion,
    SoftThreshold,
    first_difference_matrix,
    hyperplane_projector,
)

TIGHT_ADMM = ADMMConfig(tol_primal=1e-10, tol_dual=1e-10, max_iters=200_000)


def feasible_constraint(rng, p=5, m=3, rank=2):
    """Random rank-deficient constraint with b guaranteed feasible."""
    U = rng.normal(size=(p, rank))
    V = rng.normal(size=(rank, m))
    A = U @ V
    theta0 = rng.normal(size=p)
    return AffineConstraint(A, A.T @ theta0)


def operator_zoo(lam=0.8, rng=None):
    """One instance of each operator kind, keyed by kind, with its input dim."""
    rng = rng or np.random.default_rng(321)
    project, jac = hyperplane_projector(np.array([1.0, 1.0, 1.0]), 1.0)
    zoo = {
        "soft_threshold": (SoftThreshold(lam), 4),
        "affine_projection": (AffineProjection(feasible_constraint(rng)), 5),
        "nuclear": (NuclearNorm(lam, (3, 3)), 9),
        "group_row": (GroupRowNorm(lam, (4, 3)), 12),
        "set_expansion": (SetExpansion(lam, project, jac), 3),
        "fused_l1": (FusedL1(lam, first_difference_matrix(5), TIGHT_ADMM), 5),
        "flow": (FlowProx(lam * 0.5, lam * 0.8, 4, TIGHT_ADMM), 6),
    }
    return zoo


def standard_normal_model(p):
    """Identity-prox model whose posterior is exactly N(0, I_p)."""
    return Model(
        log_lik=lambda theta: 0.0,
        grad_log_lik=lambda theta: np.zeros(p),
        prox_op=Identity(),
        beta_prior=GaussianPrior.standard(p),
        dim=p,
        layout={"beta": slice(0, p)},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
