"""Splitting-based proxes: fused-l1, the net-flow constraint matrix, flow prox."""

import numpy as np
import pytest

from proxprior import (
    ADMMConfig,
    ConvergenceError,
    FlowProx,
    InvalidInputError,
    build_flow_constraint_matrix,
    first_difference_matrix,
    prox_flow,
    prox_fused_l1,
    prox_soft_threshold,
)
from proxprior.admm import _flow_admm, lower_pairs, n_nodes_from_edges

from conftest import TIGHT_ADMM


def flow_objective(z, beta, C, l1, l2):
    return 0.5 * np.sum((z - beta) ** 2) + l1 * np.sum(np.abs(z)) + l2 * np.sum(np.abs(C @ z))


def projected_subgradient_oracle(beta, C, l1, l2, iters=100_000):
    """Diminishing-step subgradient descent; returns the best objective seen."""
    z = beta.copy()
    best = np.inf
    for k in range(1, iters + 1):
        g = (z - beta) + l1 * np.sign(z) + l2 * (C.T @ np.sign(C @ z))
        z = z - g / k
        best = min(best, flow_objective(z, beta, C, l1, l2))
    return best


class TestADMMConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            ADMMConfig(gamma=0.0)
        with pytest.raises(InvalidInputError):
            ADMMConfig(tol_primal=-1.0)
        with pytest.raises(InvalidInputError):
            ADMMConfig(max_iters=0)


class TestFusedL1:
    def test_zero_scale_skips_solver(self, rng):
        beta = rng.normal(size=6)
        out = prox_fused_l1(beta, first_difference_matrix(6), 0.0,
                            ADMMConfig(max_iters=1))
        np.testing.assert_array_equal(out, beta)

    def test_constant_vector_is_fixed_point(self):
        beta = np.full(5, 1.7)
        out = prox_fused_l1(beta, first_difference_matrix(5), 0.9, TIGHT_ADMM)
        np.testing.assert_allclose(out, beta, atol=1e-8)

    def test_grid_search_oracle(self):
        beta = np.array([0.0, 1.0, 2.0])
        lam = 0.5
        out = prox_fused_l1(beta, first_difference_matrix(3), lam, TIGHT_ADMM)
        grid = np.arange(-1.0, 3.0 + 1e-9, 1e-2)
        Z1, Z2 = np.meshgrid(grid, grid, indexing="ij")
        best_obj, best_z = np.inf, None
        for z3 in grid:
            obj = (
                lam * (np.abs(Z2 - Z1) + np.abs(z3 - Z2))
                + 0.5 * ((Z1 - beta[0]) ** 2 + (Z2 - beta[1]) ** 2 + (z3 - beta[2]) ** 2)
            )
            k = np.unravel_index(np.argmin(obj), obj.shape)
            if obj[k] < best_obj:
                best_obj = obj[k]
                best_z = np.array([Z1[k], Z2[k], z3])
        assert np.max(np.abs(out - best_z)) < 2e-2

    def test_identity_design_reduces_to_soft_threshold(self, rng):
        beta = rng.normal(0, 2, size=6)
        out = prox_fused_l1(beta, np.eye(6), 0.7, TIGHT_ADMM)
        np.testing.assert_allclose(out, prox_soft_threshold(beta, 0.7), atol=1e-6)

    def test_convergence_error_carries_residuals(self, rng):
        beta = rng.normal(size=8)
        with pytest.raises(ConvergenceError) as err:
            prox_fused_l1(beta, first_difference_matrix(8), 1.0,
                          ADMMConfig(tol_primal=1e-14, tol_dual=1e-14, max_iters=3))
        assert err.value.primal_residual is not None
        assert err.value.iterations == 3

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            prox_fused_l1(rng.normal(size=4), first_difference_matrix(6), 1.0)


class TestConstraintMatrix:
    def test_three_node_rows(self):
        C = build_flow_constraint_matrix(3)
        np.testing.assert_array_equal(
            C, [[1.0, 1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, -1.0, -1.0]]
        )

    def test_columns_sum_to_zero(self):
        for n in (2, 4, 7):
            np.testing.assert_array_equal(
                build_flow_constraint_matrix(n).sum(axis=0), np.zeros(n * (n - 1) // 2)
            )

    def test_matches_double_loop_oracle(self):
        n = 6
        C = build_flow_constraint_matrix(n)
        z = np.ones(n * (n - 1) // 2)
        expected = np.zeros(n)
        for col, (i, j) in enumerate(lower_pairs(n)):
            expected[j] += z[col]
            expected[i] -= z[col]
        np.testing.assert_allclose(C @ z, expected)

    def test_too_few_nodes(self):
        with pytest.raises(InvalidInputError):
            build_flow_constraint_matrix(1)


class TestProxFlow:
    def test_identity_when_unpenalized(self, rng):
        beta = rng.normal(size=10)  # n_V = 5
        net = prox_flow(beta, 0.0, 0.0)
        np.testing.assert_array_equal(net.lower, beta)
        np.testing.assert_allclose(net.diag, net.net_flow())

    def test_full_threshold_zeroes_edges(self, rng):
        beta = rng.normal(size=6)
        net = prox_flow(beta, np.abs(beta).max() + 0.1, 0.0, TIGHT_ADMM)
        np.testing.assert_allclose(net.lower, np.zeros(6), atol=1e-9)

    def test_non_triangular_length(self):
        with pytest.raises(InvalidInputError):
            prox_flow(np.zeros(5), 0.1, 0.1)
        assert n_nodes_from_edges(15) == 6

    def test_subgradient_descent_oracle(self):
        C = build_flow_constraint_matrix(4)
        for seed in range(3):
            beta = np.random.default_rng(seed).normal(size=6)
            net = prox_flow(beta, 0.3, 0.5, TIGHT_ADMM)
            ours = flow_objective(net.lower, beta, C, 0.3, 0.5)
            oracle = projected_subgradient_oracle(beta, C, 0.3, 0.5)
            assert ours <= oracle + 1e-3

    def test_skew_symmetric_reconstruction(self, rng):
        net = prox_flow(rng.normal(size=10), 0.2, 0.3, TIGHT_ADMM)
        M = net.to_matrix()
        off = M - np.diag(np.diag(M))
        np.testing.assert_array_equal(off, -off.T)

    def test_diag_equals_net_column_flow(self, rng):
        net = prox_flow(rng.normal(size=10), 0.2, 0.3, TIGHT_ADMM)
        np.testing.assert_allclose(net.diag, net.net_flow(), atol=1e-12)

    def test_factorization_reuse_matches_refactoring(self, rng):
        beta = rng.normal(size=6)
        cached = prox_flow(beta, 0.3, 0.4, TIGHT_ADMM)
        refactored = prox_flow(beta, 0.3, 0.4, TIGHT_ADMM, _refactor_each_iteration=True)
        np.testing.assert_allclose(cached.lower, refactored.lower, atol=1e-12)

    def test_primal_residual_below_tolerance_at_exit(self, rng):
        cfg = ADMMConfig(tol_primal=1e-8, tol_dual=1e-8, max_iters=100_000)
        C = build_flow_constraint_matrix(5)
        for _ in range(5):
            beta = rng.normal(size=10)
            W, X, _ = _flow_admm(beta[:, None], C, 0.2, 0.4, cfg)
            assert np.max(np.abs(C @ W[:, 0] - X[:, 0])) <= 1e-8

    def test_convergence_error(self, rng):
        with pytest.raises(ConvergenceError) as err:
            prox_flow(rng.normal(size=6), 0.3, 0.4,
                      ADMMConfig(tol_primal=1e-14, tol_dual=1e-14, max_iters=2))
        assert err.value.primal_residual is not None

    def test_batch_matches_single_calls(self, rng):
        op = FlowProx(0.25, 0.4, 4, TIGHT_ADMM)
        B = rng.normal(size=(6, 7))
        batch = op.apply_batch(B)
        for k in range(7):
            np.testing.assert_allclose(batch[:, k], op(B[:, k]), atol=1e-7)

    def test_family_rescaling_keeps_ratio(self):
        op = FlowProx(0.2, 0.5, 4)
        op2 = op.with_lambda(0.4)
        assert op2.lam == pytest.approx(0.4)
        assert op2.lam2 == pytest.approx(1.0)
