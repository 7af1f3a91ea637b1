"""Deformation curves: closed-form quadratic case, quadrature oracles, inversion."""

import numpy as np
import pytest
from scipy import integrate, stats

from proxprior import (
    AffineProjection,
    DeformationCurve,
    DegenerateOperatorError,
    Identity,
    QuadraticRidge,
    SoftThreshold,
    build_curve,
    default_lambda_grid,
    estimate_deformation,
    lambda_from_omega,
    sample_lambda,
)

from conftest import feasible_constraint


def gaussian_sampler(p, sd=1.0):
    def sampler(rng, n):
        return rng.normal(0.0, sd, size=(n, p))

    return sampler


def quadratic_curve(n_points=400, lo=1e-3, hi=1e3):
    """Analytic deformation curve of the quadratic penalty: omega = lam/(1+lam)."""
    lams = np.geomspace(lo, hi, n_points)
    return DeformationCurve(lams, lams / (1.0 + lams), 0, None)


class TestEstimateDeformation:
    def test_zero_scale_gives_zero(self):
        om = estimate_deformation(SoftThreshold(0.0), gaussian_sampler(2), n_mc=500, seed=0)
        assert om == 0.0

    def test_quadratic_closed_form(self):
        # omega(lam) = lam/(1+lam) exactly for the ridge map
        for lam in (0.5, 1.0, 2.0):
            om = estimate_deformation(QuadraticRidge(lam), gaussian_sampler(1),
                                      n_mc=100_000, seed=11)
            assert abs(om - lam / (1 + lam)) / (lam / (1 + lam)) < 0.02

    def test_soft_threshold_quadrature_oracle(self):
        # univariate N(0,1): omega = E min(|b|, lam) / E |b|
        lam = 0.8
        num, _ = integrate.quad(lambda b: min(abs(b), lam) * stats.norm.pdf(b), -12, 12)
        den = np.sqrt(2 / np.pi)
        om = estimate_deformation(SoftThreshold(lam), gaussian_sampler(1),
                                  n_mc=100_000, seed=5)
        assert abs(om - num / den) / (num / den) < 0.02

    def test_degenerate_operator_raises(self):
        with pytest.raises(DegenerateOperatorError):
            estimate_deformation(Identity(), gaussian_sampler(3), n_mc=200, seed=0)


class TestBuildCurve:
    def test_quadratic_grid_values(self):
        curve = build_curve(QuadraticRidge(1.0), gaussian_sampler(1),
                            [0.5, 1.0, 2.0], n_mc=100_000, seed=3)
        np.testing.assert_allclose(curve.omegas, [1 / 3, 1 / 2, 2 / 3], rtol=0.02)

    def test_omegas_non_decreasing(self, rng):
        curve = build_curve(SoftThreshold(1.0), gaussian_sampler(4),
                            np.geomspace(0.01, 20, 25), n_mc=2000, seed=9)
        assert np.all(np.diff(curve.omegas) >= 0)
        assert curve.omegas[0] >= 0 and curve.omegas[-1] <= 1

    def test_soft_threshold_saturates(self):
        # scales beyond every draw magnitude push the deformation to 1
        curve = build_curve(SoftThreshold(1.0), gaussian_sampler(10),
                            np.geomspace(0.01, 100, 30), n_mc=5000, seed=2)
        assert curve.omegas[-1] > 0.999
        assert curve.omegas[0] < 0.05

    def test_reproducible_from_seed(self):
        a = build_curve(SoftThreshold(1.0), gaussian_sampler(3),
                        np.geomspace(0.1, 10, 10), n_mc=3000, seed=42)
        b = build_curve(SoftThreshold(1.0), gaussian_sampler(3),
                        np.geomspace(0.1, 10, 10), n_mc=3000, seed=42)
        np.testing.assert_array_equal(a.omegas, b.omegas)

    def test_scale_invariant_operator_raises(self, rng):
        op = AffineProjection(feasible_constraint(rng))
        with pytest.raises(DegenerateOperatorError):
            build_curve(op, gaussian_sampler(5), np.geomspace(0.1, 10, 5),
                        n_mc=500, seed=0)

    def test_default_grid_reaches_saturation(self):
        grid = default_lambda_grid(SoftThreshold(1.0), gaussian_sampler(2),
                                   n_grid=20, probe_mc=1000, seed=1)
        assert grid.size == 20 and grid[0] == pytest.approx(1e-3)
        om = estimate_deformation(SoftThreshold(grid[-1]), gaussian_sampler(2),
                                  n_mc=2000, seed=1)
        assert om >= 0.99


class TestInversion:
    def test_quadratic_midpoint(self):
        assert lambda_from_omega(quadratic_curve(), 0.5) == pytest.approx(1.0, rel=1e-3)

    def test_clamps_below_and_above(self):
        curve = quadratic_curve()
        assert lambda_from_omega(curve, 1e-9) == curve.lambdas[0]
        assert lambda_from_omega(curve, 0.999999999) == curve.lambdas[-1]

    def test_flat_segment_returns_left_knot(self):
        curve = DeformationCurve([1.0, 2.0, 3.0, 4.0], [0.1, 0.5, 0.5, 0.9], 0, None)
        assert lambda_from_omega(curve, 0.5) == 2.0

    def test_identity_on_strictly_increasing_knots(self):
        curve = quadratic_curve(50, 1e-2, 1e2)
        for k in range(0, 50, 7):
            assert lambda_from_omega(curve, curve.omegas[k]) == pytest.approx(
                curve.lambdas[k], rel=1e-12
            )

    def test_refinement_oracle(self):
        coarse = quadratic_curve(40, 1e-2, 1e2)
        fine = quadratic_curve(400, 1e-2, 1e2)
        for om in np.linspace(0.05, 0.95, 19):
            lam_c = lambda_from_omega(coarse, om)
            lam_f = lambda_from_omega(fine, om)
            k = np.searchsorted(fine.lambdas, lam_f)
            spacing = fine.lambdas[min(k + 1, 399)] - fine.lambdas[max(k - 1, 0)]
            assert abs(lam_c - lam_f) <= max(spacing, 0.05 * lam_f)


class TestSampleLambda:
    def test_uniform_deformation_induces_known_law(self):
        # under a uniform deformation prior the scale has cdf t / (1 + t)
        curve = quadratic_curve()
        rng = np.random.default_rng(31)
        draws = np.array([sample_lambda(curve, 1.0, 1.0, rng) for _ in range(100_000)])
        ks = stats.kstest(draws, lambda t: t / (1.0 + t)).statistic
        assert ks <= 0.01

    def test_beta_concentration(self):
        curve = quadratic_curve()
        rng = np.random.default_rng(8)
        big = np.array([sample_lambda(curve, 200.0, 1.0, rng) for _ in range(500)])
        assert np.median(big) > 50.0

    def test_fixed_seed_reproducible(self):
        curve = quadratic_curve()
        a = [sample_lambda(curve, 1, 1, np.random.default_rng(4)) for _ in range(5)]
        b = [sample_lambda(curve, 1, 1, np.random.default_rng(4)) for _ in range(5)]
        assert a == b

    def test_bad_shapes_rejected(self):
        with pytest.raises(Exception):
            sample_lambda(quadratic_curve(), 0.0, 1.0, np.random.default_rng(0))
