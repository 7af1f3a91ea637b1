"""Deformation-based calibration of the prox scale.

The deformation of an operator at scale ``lam`` is the ratio of the mean
displacement ``||beta - prox_lam(beta)||`` to its scale-infinity limit
``||beta - limit(beta)||``, both averaged over the pre-image prior.  It is
monotone in ``lam`` and lives in [0, 1], so a Beta prior on the deformation
induces a prior on ``lam`` through the inverse curve.  The curve is estimated
by Monte Carlo on a grid with common random numbers, cleaned up by isotonic
regression, and inverted by piecewise-linear interpolation that returns the
smallest pre-image on flat stretches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateOperatorError, InvalidInputError
from .operators import ProxOperator

_DEGENERATE_TOL = 1e-12


def _as_rng(rng_or_seed):
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def _pool_adjacent_violators(y):
    """Isotonic (non-decreasing) least-squares fit with equal weights."""
    values = []
    counts = []
    for v in np.asarray(y, dtype=float):
        values.append(v)
        counts.append(1)
        while len(values) > 1 and values[-2] > values[-1]:
            merged = (values[-2] * counts[-2] + values[-1] * counts[-1]) / (
                counts[-2] + counts[-1]
            )
            counts[-2] += counts[-1]
            values[-2] = merged
            values.pop()
            counts.pop()
    return np.repeat(values, counts)


@dataclass(frozen=True)
class DeformationCurve:
    """Monotone grid of (lambda, omega) pairs plus the sampling metadata."""

    lambdas: np.ndarray
    omegas: np.ndarray
    n_mc: int
    seed: int | None

    def __post_init__(self):
        lambdas = np.asarray(self.lambdas, dtype=float)
        omegas = np.asarray(self.omegas, dtype=float)
        if lambdas.ndim != 1 or lambdas.size < 2:
            raise InvalidInputError("curve needs at least 2 grid points")
        if np.any(lambdas <= 0) or np.any(np.diff(lambdas) <= 0):
            raise InvalidInputError("lambda grid must be positive and strictly increasing")
        if omegas.shape != lambdas.shape:
            raise InvalidInputError("lambdas and omegas must have equal length")
        if np.any(np.diff(omegas) < 0):
            raise InvalidInputError("omegas must be non-decreasing (apply isotonic cleanup)")
        if omegas[0] < 0 or omegas[-1] > 1:
            raise InvalidInputError("omegas must lie in [0, 1]")
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "omegas", omegas)


def _displacements(draws, mapped):
    return np.linalg.norm(draws - mapped, axis=1)


def _limit_values(op, limit_point, draws):
    if limit_point is None:
        limit_point = op.limit_point
    return np.array([np.asarray(limit_point(row), dtype=float) for row in draws])


def estimate_deformation(op: ProxOperator, prior_sampler, limit_point=None,
                         n_mc=10_000, seed=None):
    """Monte Carlo deformation of ``op`` at its own scale.

    ``prior_sampler(rng, n)`` must return an (n, p) array of pre-image draws.
    Numerator and denominator share the same draws.  A denominator below
    1e-12 means the operator is invariant to its scale (a pure constraint),
    for which no deformation is defined.
    """
    rng = _as_rng(seed)
    draws = np.asarray(prior_sampler(rng, n_mc), dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    denom = float(np.mean(_displacements(draws, _limit_values(op, limit_point, draws))))
    if denom < _DEGENERATE_TOL:
        raise DegenerateOperatorError(
            "scale-infinity displacement is numerically zero; the operator is "
            "invariant to its scale and has no deformation curve"
        )
    mapped = op.apply_batch(draws.T).T
    return float(np.mean(_displacements(draws, mapped))) / denom


def build_curve(op_family: ProxOperator, prior_sampler, lambda_grid,
                n_mc=10_000, seed=None) -> DeformationCurve:
    """Estimate the deformation at each grid scale with shared draws.

    The raw estimates are monotone in expectation; isotonic regression
    removes the Monte Carlo wiggle so the curve can be inverted.
    """
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size < 2 or np.any(np.diff(lambda_grid) <= 0) or np.any(lambda_grid <= 0):
        raise InvalidInputError("lambda grid must be >= 2 strictly increasing positive points")
    rng = _as_rng(seed)
    draws = np.asarray(prior_sampler(rng, n_mc), dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    denom = float(np.mean(_displacements(draws, _limit_values(op_family, None, draws))))
    if denom < _DEGENERATE_TOL:
        raise DegenerateOperatorError(
            "scale-infinity displacement is numerically zero; the operator is "
            "invariant to its scale and has no deformation curve"
        )
    omegas = np.empty(lambda_grid.size)
    for k, lam in enumerate(lambda_grid):
        mapped = op_family.with_lambda(lam).apply_batch(draws.T).T
        omegas[k] = np.mean(_displacements(draws, mapped)) / denom
    if omegas.max() - omegas.min() < 1e-9:
        raise DegenerateOperatorError(
            "deformation is constant across the grid; the operator appears "
            "invariant to its scale"
        )
    omegas = np.clip(_pool_adjacent_violators(omegas), 0.0, 1.0)
    seed_out = seed if (seed is None or isinstance(seed, (int, np.integer))) else None
    return DeformationCurve(lambda_grid, omegas, int(n_mc), seed_out)


def lambda_from_omega(curve: DeformationCurve, omega):
    """Invert the curve: the smallest scale whose deformation reaches ``omega``.

    Out-of-range targets clamp to the grid endpoints; on flat stretches the
    left endpoint is returned, honoring the minimal-preimage convention.
    """
    omega = float(omega)
    lams, oms = curve.lambdas, curve.omegas
    if omega <= oms[0]:
        return float(lams[0])
    if omega > oms[-1]:
        return float(lams[-1])
    i = int(np.searchsorted(oms, omega, side="left"))
    if oms[i] == omega:
        return float(lams[i])
    t = (omega - oms[i - 1]) / (oms[i] - oms[i - 1])
    return float(lams[i - 1] + t * (lams[i] - lams[i - 1]))


def sample_lambda(curve: DeformationCurve, a_omega=1.0, b_omega=1.0, rng=None):
    """Draw a deformation from Beta(a, b) and map it through the inverse curve."""
    if a_omega <= 0 or b_omega <= 0:
        raise InvalidInputError("Beta shape parameters must be positive")
    rng = _as_rng(rng)
    return lambda_from_omega(curve, rng.beta(a_omega, b_omega))


def default_lambda_grid(op_family: ProxOperator, prior_sampler, n_grid=50,
                        probe_mc=2000, seed=0, lam_min=1e-3):
    """Log-spaced grid from ``lam_min`` to a cap where deformation >= 0.999.

    The cap is found by doubling a probe scale with a small Monte Carlo
    sample; callers wanting reproducible curves should still build the final
    curve with their own ``n_mc`` and ``seed``.
    """
    cap = 1.0
    for _ in range(60):
        om = estimate_deformation(op_family.with_lambda(cap), prior_sampler,
                                  n_mc=probe_mc, seed=seed)
        if om >= 0.999:
            break
        cap *= 2.0
    return np.geomspace(lam_min, cap, n_grid)
