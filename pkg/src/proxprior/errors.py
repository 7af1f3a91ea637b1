"""Exception types shared across the package."""


class ProxPriorError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ProxPriorError, ValueError):
    """Non-finite or mis-shaped input to an operator or model."""


class InfeasibleConstraintError(ProxPriorError, ValueError):
    """Affine constraint set {theta : A^T theta = b} is empty."""


class ConvergenceError(ProxPriorError, RuntimeError):
    """Iterative solver hit its iteration cap before meeting tolerances.

    Carries the final residuals so callers can inspect how close the run got.
    """

    def __init__(self, message, primal_residual=None, dual_residual=None, iterations=None):
        super().__init__(message)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.iterations = iterations


class NumericalError(ProxPriorError, RuntimeError):
    """Dense linear-algebra kernel (e.g. SVD) failed to converge."""


class DegenerateOperatorError(ProxPriorError, ValueError):
    """Operator is invariant to its scale, so no deformation curve exists."""


class DivergentTrajectoryError(ProxPriorError, RuntimeError):
    """Leapfrog trajectory produced a non-finite state; caller should reject."""


class ChainFailureError(ProxPriorError, RuntimeError):
    """Sampler produced too many divergent iterations to trust the chain."""


class ConfigurationError(ProxPriorError, ValueError):
    """Run configuration is inconsistent or incomplete."""
