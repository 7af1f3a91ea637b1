"""Posterior summaries, set-membership Bayes factors, and factor counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .sampler import Chain

EXACT_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class HypothesisResult:
    """Bayes factor for ``H0: theta in C`` against its complement.

    ``bf01`` multiplies the posterior odds of membership by the prior odds
    of non-membership; ``flag`` records the infinite/zero sentinels that
    arise when one side has no posterior draws at all.
    """

    bf01: float
    posterior_in: int
    posterior_out: int
    prior_in: float
    prior_out: float
    lam: float
    flag: str = "finite"

    @property
    def n_draws(self):
        return self.posterior_in + self.posterior_out


def _distances_to_set(points, project_C):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.array(
        [np.linalg.norm(row - np.asarray(project_C(row), dtype=float)) for row in points]
    )


def bayes_factor_set_expansion(chain: Chain, model, lam=None, n_prior_mc=100_000,
                               seed=0, project_C=None):
    """Estimate the membership Bayes factor from a set-expansion chain.

    Posterior membership counts pre-image draws within ``lam`` of the set;
    prior membership is estimated by fresh Monte Carlo from the pre-image
    prior (independent of the chain).  ``lam`` defaults to the scale stored
    in the chain; supplying a different value is a configuration error.
    """
    op = model.prox_op
    if project_C is None:
        project_C = getattr(op, "project", None)
        if project_C is None:
            raise ConfigurationError("model's operator has no projector; pass project_C")
    chain_lam = chain.lambda_used
    if lam is None:
        lam = chain_lam if chain_lam is not None else getattr(op, "lam", None)
    if lam is None:
        raise ConfigurationError("no expansion radius available")
    if chain_lam is not None and not np.isclose(float(chain_lam), float(lam)):
        raise ConfigurationError(
            f"lambda mismatch: chain was drawn at {chain_lam}, asked to test at {lam}"
        )
    lam = float(lam)

    post_dist = _distances_to_set(chain.beta_draws, project_C)
    posterior_in = int(np.sum(post_dist < lam))
    posterior_out = int(post_dist.size - posterior_in)

    rng = np.random.default_rng(seed)
    prior_draws = model.beta_prior.sample(rng, n_prior_mc)
    prior_dist = _distances_to_set(prior_draws, project_C)
    prior_in = float(np.mean(prior_dist < lam))
    prior_out = 1.0 - prior_in

    if posterior_out == 0:
        return HypothesisResult(np.inf, posterior_in, 0, prior_in, prior_out, lam, "infinite")
    if posterior_in == 0:
        return HypothesisResult(0.0, 0, posterior_out, prior_in, prior_out, lam, "zero")
    bf01 = (posterior_in / posterior_out) * (prior_out / prior_in)
    return HypothesisResult(float(bf01), posterior_in, posterior_out, prior_in, prior_out, lam)


def balanced_lambda(project_C, beta_prior, n_mc=100_000, seed=0):
    """Radius splitting the prior mass evenly: the median prior distance to the set."""
    if n_mc < 1000:
        raise InvalidInputError("need at least 1000 Monte Carlo draws")
    rng = np.random.default_rng(seed)
    draws = beta_prior.sample(rng, n_mc)
    return float(np.median(_distances_to_set(draws, project_C)))


def summarize(chain: Chain, credible_level=0.95):
    """Per-coordinate posterior summary of both coordinate systems.

    Returns a dict of equal-length arrays: mean, median, equal-tailed
    credible bounds for image and pre-image coordinates, plus the exact-zero
    rate of the image coordinates (closed-form shrinkage operators emit
    bit-exact zeros, so the detector threshold of 1e-12 is safe).
    """
    if len(chain) == 0:
        raise InvalidInputError("cannot summarize an empty chain")
    if not (0 < credible_level < 1):
        raise InvalidInputError("credible_level must be in (0, 1)")
    alpha = (1.0 - credible_level) / 2.0
    theta, beta = chain.theta_draws, chain.beta_draws
    return {
        "coordinate": np.arange(theta.shape[1]),
        "theta_mean": theta.mean(axis=0),
        "theta_median": np.median(theta, axis=0),
        "theta_lo": np.quantile(theta, alpha, axis=0),
        "theta_hi": np.quantile(theta, 1 - alpha, axis=0),
        "theta_zero_rate": np.mean(np.abs(theta) <= EXACT_ZERO_TOL, axis=0),
        "beta_mean": beta.mean(axis=0),
        "beta_median": np.median(beta, axis=0),
        "beta_lo": np.quantile(beta, alpha, axis=0),
        "beta_hi": np.quantile(beta, 1 - alpha, axis=0),
    }


def factor_count_posterior(chain: Chain, model, threshold=1e-6):
    """Distribution of the number of switched-on factors across draws.

    A factor counts as on when its loading row is not identically zero;
    the small norm threshold absorbs the convergence floor of iteratively
    solved proxes.  Returns (histogram over 0..d, mode).
    """
    info = getattr(model, "info", {})
    if info.get("kind") != "flow_factor":
        raise ConfigurationError("factor counts require a flow-factor model")
    layout = model.layout
    if chain.theta_draws.shape[1] != model.dim:
        raise InvalidInputError(
            f"chain width {chain.theta_draws.shape[1]} does not match model dim {model.dim}"
        )
    d, T = info["d"], info["T"]
    sl = layout["loadings"]
    loads = chain.theta_draws[:, sl].reshape(len(chain), d, T)
    row_norms = np.linalg.norm(loads, axis=2)
    counts = np.sum(row_norms > threshold, axis=1)
    hist = np.bincount(counts, minlength=d + 1).astype(float)
    hist /= hist.sum()
    return hist, int(np.argmax(hist))


def trace_contraction(chain: Chain, n_boot=200, seed=0):
    """Bootstrap check of the posterior trace-covariance contraction.

    The image draws are a non-expansive transform of the pre-image draws,
    so ``tr Cov(theta) <= tr Cov(beta)`` holds in expectation; the bootstrap
    standard error quantifies the Monte Carlo slack.
    """
    theta, beta = chain.theta_draws, chain.beta_draws
    n = len(theta)
    if n < 4:
        raise InvalidInputError("need at least 4 draws")

    def trace_gap(idx):
        t = np.sum(np.var(theta[idx], axis=0))
        b = np.sum(np.var(beta[idx], axis=0))
        return b - t

    rng = np.random.default_rng(seed)
    gaps = np.array([trace_gap(rng.integers(0, n, size=n)) for _ in range(n_boot)])
    gap = trace_gap(np.arange(n))
    se = float(gaps.std(ddof=1))
    return {
        "tr_cov_theta": float(np.sum(np.var(theta, axis=0))),
        "tr_cov_beta": float(np.sum(np.var(beta, axis=0))),
        "gap": float(gap),
        "se": se,
        "satisfied": bool(gap >= -3.0 * se),
    }
