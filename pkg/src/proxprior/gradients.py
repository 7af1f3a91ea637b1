"""Derivatives of proximal maps and of the transformed log posterior.

The log posterior in the pre-image coordinates factors as
``log L(y; prox(beta)) + log prior(beta)``, so its gradient is the
likelihood gradient pulled back through the prox derivative plus the prior
gradient.  Operators with a registered closed-form derivative use it;
everything else falls back to simultaneous-perturbation estimation, which
needs only ``m + 1`` prox evaluations regardless of dimension.

Jacobian convention throughout: rows index the *input* coordinate, i.e.
``J[j, i] = d prox_i / d beta_j``, so the pullback is the plain product
``J @ grad_theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .operators import BlockProx, ProxOperator


@dataclass(frozen=True)
class SPSAConfig:
    """Perturbation scale and averaging count for the stochastic estimator."""

    epsilon: float = 1e-7
    m: int = 20
    seed: int | None = None

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise InvalidInputError("epsilon must be positive")
        if self.m < 1:
            raise InvalidInputError("m must be at least 1")


def _rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0


def spsa_jacobian(op: ProxOperator, beta, cfg: SPSAConfig = SPSAConfig(), rng=None):
    """Simultaneous-perturbation estimate of the prox derivative at ``beta``.

    Averages ``{prox(beta + eps*D) - prox(beta)} / (D_j * eps)`` over ``m``
    independent Rademacher draws ``D``; ``prox(beta)`` is evaluated once and
    reused, for ``m + 1`` prox evaluations in total.  Diagonal entries of
    piecewise-linear operators are recovered exactly; off-diagonal entries
    carry zero-mean cross-coordinate noise of scale ``O(1/sqrt(m))``, which
    seed-averaging reduces further.
    """
    beta = np.asarray(beta, dtype=float)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    p = beta.size
    base = np.asarray(op(beta), dtype=float).ravel()
    Delta = _rademacher(rng, (p, cfg.m))
    perturbed = op.apply_batch(beta[:, None] + cfg.epsilon * Delta)
    diffs = (perturbed - base[:, None]) / cfg.epsilon  # (p_out, m)
    # J[j, :] = mean_k Delta[j, k] * diffs[:, k]  (1/D_j == D_j for +-1 entries)
    return (Delta @ diffs.T) / cfg.m


def finite_diff_jacobian(op: ProxOperator, beta, h=1e-6):
    """Central-difference derivative, one coordinate pair per input dimension.

    Costs ``2p`` prox evaluations; serves as the deterministic oracle that
    the stochastic estimator is validated against.
    """
    beta = np.asarray(beta, dtype=float)
    p = beta.size
    steps = h * np.eye(p)
    plus = op.apply_batch(beta[:, None] + steps)
    minus = op.apply_batch(beta[:, None] - steps)
    return (plus - minus).T / (2.0 * h)


def prox_pullback(op: ProxOperator, beta, grad_theta, cfg: SPSAConfig = SPSAConfig(), rng=None):
    """Compute ``J @ grad_theta`` without materializing J when possible.

    Dispatch order: blockwise recursion for composites, a registered
    closed-form derivative when the operator has one, otherwise the
    simultaneous-perturbation estimate contracted against ``grad_theta``
    (same evaluations as the full estimate, no matrix formed).
    """
    beta = np.asarray(beta, dtype=float)
    grad_theta = np.asarray(grad_theta, dtype=float)
    if isinstance(op, BlockProx):
        out = np.empty_like(beta)
        for _, sl, sub in op.blocks:
            out[sl] = prox_pullback(sub, beta[sl], grad_theta[sl], cfg, rng)
        return out
    J = op.jacobian(beta)
    if J is not None:
        return J @ grad_theta
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    base = np.asarray(op(beta), dtype=float).ravel()
    Delta = _rademacher(rng, (beta.size, cfg.m))
    perturbed = op.apply_batch(beta[:, None] + cfg.epsilon * Delta)
    inner = grad_theta @ ((perturbed - base[:, None]) / cfg.epsilon)  # (m,)
    return (Delta @ inner) / cfg.m


def log_posterior_grad(model, beta, cfg: SPSAConfig = SPSAConfig(), rng=None):
    """Gradient of the pre-image log posterior at ``beta``.

    Chain rule through the model's prox (closed form or stochastic per
    operator) applied to the likelihood gradient at ``theta = prox(beta)``,
    plus the prior score.
    """
    beta = np.asarray(beta, dtype=float)
    theta = model.prox(beta)
    grad_theta = model.grad_log_lik(theta)
    lik_part = prox_pullback(model.prox_op, beta, grad_theta, cfg, rng)
    return lik_part + model.beta_prior.grad(beta)
