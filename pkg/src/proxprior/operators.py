"""Closed-form proximal operators and the shared operator abstraction.

Every operator evaluates ``prox_{lam * g}(beta) = argmin_z lam*g(z) + 0.5*||z - beta||^2``
for its own penalty ``g``. Operators are immutable after construction, pure in
their inputs, and safe to share across threads.

The common protocol, used by the calibration, gradient, and sampler modules:

``op(beta)``
    evaluate the map at a point (1-D vector, or the operator's natural
    matrix shape for matrix penalties).
``op.apply_batch(B)``
    evaluate at many points at once, one column per point.
``op.penalty(z)``
    the scaled penalty ``lam * g(z)`` (a large finite sentinel stands in
    for +inf on infeasible points of constraint-type penalties).
``op.with_lambda(lam)``
    the same operator family at a different scale.
``op.limit_point(beta)``
    the image of ``beta`` as the scale grows without bound.
``op.jacobian(beta)``
    the derivative matrix with rows indexed by the *input* coordinate
    (``J[j, i] = d out_i / d beta_j``), or ``None`` when no closed form
    is registered (callers fall back to stochastic estimation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InfeasibleConstraintError, InvalidInputError, NumericalError

INFEASIBLE_SENTINEL = 1e300
_FEAS_TOL = 1e-8
_PINV_RCOND = 1e-10


def _check_finite(x, name="input"):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def _check_lambda(lam):
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise InvalidInputError(f"lambda must be finite and nonnegative, got {lam}")
    return lam


# ---------------------------------------------------------------------------
# plain functions


def prox_soft_threshold(beta, lam):
    """Elementwise ``sign(b) * max(|b| - lam, 0)``, the prox of the l1 norm."""
    beta = _check_finite(beta, "beta")
    lam = _check_lambda(lam)
    return np.sign(beta) * np.maximum(np.abs(beta) - lam, 0.0)


def prox_nuclear(B, lam):
    """Singular-value soft thresholding for a rectangular matrix.

    With ``B = U diag(s) V^T``, returns ``U diag(max(s - lam, 0)) V^T``.
    """
    B = _check_finite(B, "B")
    lam = _check_lambda(lam)
    try:
        U, s, Vt = np.linalg.svd(B, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge on a {B.shape} matrix: {exc}") from exc
    return (U * np.maximum(s - lam, 0.0)) @ Vt


def prox_group_row(B, lam):
    """Rowwise shrinkage ``b_i * max(1 - lam/||b_i||, 0)``; zero rows stay zero."""
    B = np.atleast_2d(_check_finite(B, "B"))
    lam = _check_lambda(lam)
    norms = np.linalg.norm(B, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    scale = np.maximum(1.0 - lam / safe, 0.0) * (norms > 0)
    return B * scale[:, None]


def prox_set_expansion(beta, project, lam):
    """Prox of the Euclidean distance function to a convex set.

    Points within ``lam`` of the set are projected onto it; farther points
    are pulled ``lam`` closer along the projection direction.
    """
    beta = _check_finite(beta, "beta")
    lam = _check_lambda(lam)
    p = np.asarray(project(beta), dtype=float)
    d = np.linalg.norm(beta - p)
    if d < lam or d == 0.0:
        return p
    return beta + (lam / d) * (p - beta)


def prox_affine_projection(beta, constraint):
    """Euclidean projection onto ``{theta : A^T theta = b}`` (scale-invariant)."""
    beta = _check_finite(beta, "beta")
    return constraint.project(beta)


def prox_objective(z, beta, op):
    """Objective ``lam*g(z) + 0.5*||z - beta||^2`` minimized by ``op`` at ``beta``.

    Infeasible ``z`` under a constraint-type penalty yields a large finite
    sentinel so comparisons stay total.
    """
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    pen = op.penalty(z)
    if pen >= INFEASIBLE_SENTINEL:
        return INFEASIBLE_SENTINEL
    return pen + 0.5 * float(np.sum((z - beta) ** 2))


# ---------------------------------------------------------------------------
# constraint description


@dataclass(frozen=True)
class AffineConstraint:
    """The set ``{theta in R^p : A^T theta = b}`` with A of shape (p, m).

    Feasibility (``b`` in the column space of ``A^T``) is checked at
    construction through the least-squares residual of ``A^T theta = b``.
    Rank-deficient ``A`` is handled by the Moore-Penrose inverse with
    singular values below ``1e-10 * s_max`` treated as zero.
    """

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.ndim != 2:
            raise InvalidInputError("A must be a 2-D array of shape (p, m)")
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        _check_finite(A, "A")
        _check_finite(b, "b")
        p, m = A.shape
        if b.shape != (m,):
            raise InvalidInputError(f"b must have length {m}, got {b.shape}")
        if m == 0:
            gram_pinv = np.zeros((0, 0))
        else:
            gram_pinv = np.linalg.pinv(A.T @ A, rcond=_PINV_RCOND)
        offset = A @ (gram_pinv @ b)
        if m and np.linalg.norm(A.T @ offset - b) > _FEAS_TOL * max(1.0, np.linalg.norm(b)):
            raise InfeasibleConstraintError(
                "b is not in the column space of A^T; the constraint set is empty"
            )
        projector = np.eye(p) - A @ gram_pinv @ A.T
        object.__setattr__(self, "_offset", offset)
        object.__setattr__(self, "_projector", projector)

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def projector(self):
        """The orthogonal projector ``I - A (A^T A)^- A^T`` onto null(A^T)."""
        return self._projector

    def project(self, beta):
        """Project ``beta`` onto the constraint set."""
        return self._projector @ np.asarray(beta, dtype=float) + self._offset

    def residual(self, theta):
        return float(np.linalg.norm(self.A.T @ np.asarray(theta, dtype=float) - self.b))


# ---------------------------------------------------------------------------
# operator classes


class ProxOperator:
    """Base class; see the module docstring for the protocol."""

    kind: str = ""

    def __init__(self, lam):
        self.lam = _check_lambda(lam)

    def __call__(self, beta):
        raise NotImplementedError

    def apply_batch(self, B):
        """Evaluate at each column of ``B``; default falls back to a loop."""
        B = np.asarray(B, dtype=float)
        return np.column_stack([self(B[:, k]) for k in range(B.shape[1])])

    def penalty(self, z):
        raise NotImplementedError

    def with_lambda(self, lam):
        raise NotImplementedError

    def limit_point(self, beta):
        raise NotImplementedError

    def jacobian(self, beta):
        return None

    def __repr__(self):
        return f"{type(self).__name__}(lam={self.lam!r})"


class Identity(ProxOperator):
    """The identity map (zero penalty); used for unregularized blocks."""

    kind = "identity"

    def __init__(self, lam=0.0):
        super().__init__(lam)

    def __call__(self, beta):
        return np.asarray(beta, dtype=float).copy()

    def apply_batch(self, B):
        return np.asarray(B, dtype=float).copy()

    def penalty(self, z):
        return 0.0

    def with_lambda(self, lam):
        return Identity(lam)

    def limit_point(self, beta):
        return np.asarray(beta, dtype=float).copy()

    def jacobian(self, beta):
        return np.eye(np.asarray(beta).size)


class QuadraticRidge(ProxOperator):
    """Prox of ``g(z) = ||z||^2 / 2``, namely ``beta / (1 + lam)``.

    The one operator whose deformation curve has a closed form
    (``lam / (1 + lam)``), which makes it the reference case for
    calibration tests.
    """

    kind = "quadratic"

    def __call__(self, beta):
        return np.asarray(beta, dtype=float) / (1.0 + self.lam)

    def apply_batch(self, B):
        return np.asarray(B, dtype=float) / (1.0 + self.lam)

    def penalty(self, z):
        return self.lam * 0.5 * float(np.sum(np.asarray(z, dtype=float) ** 2))

    def with_lambda(self, lam):
        return QuadraticRidge(lam)

    def limit_point(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=float))

    def jacobian(self, beta):
        return np.eye(np.asarray(beta).size) / (1.0 + self.lam)


class SoftThreshold(ProxOperator):
    kind = "soft_threshold"

    def __call__(self, beta):
        return prox_soft_threshold(beta, self.lam)

    def apply_batch(self, B):
        B = _check_finite(B, "B")
        return np.sign(B) * np.maximum(np.abs(B) - self.lam, 0.0)

    def penalty(self, z):
        return self.lam * float(np.sum(np.abs(z)))

    def with_lambda(self, lam):
        return SoftThreshold(lam)

    def limit_point(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=float))

    def jacobian(self, beta):
        beta = np.asarray(beta, dtype=float)
        return np.diag((np.abs(beta) > self.lam).astype(float))


class AffineProjection(ProxOperator):
    """Projection onto an affine set; invariant to the scale by construction."""

    kind = "affine_projection"

    def __init__(self, constraint: AffineConstraint, lam=1.0):
        super().__init__(lam)
        self.constraint = constraint

    def __call__(self, beta):
        return prox_affine_projection(beta, self.constraint)

    def apply_batch(self, B):
        B = _check_finite(B, "B")
        c = self.constraint
        return c.projector @ B + c._offset[:, None]

    def penalty(self, z):
        feasible = self.constraint.residual(z) <= _FEAS_TOL * max(
            1.0, float(np.linalg.norm(z))
        )
        return 0.0 if feasible else INFEASIBLE_SENTINEL

    def with_lambda(self, lam):
        return AffineProjection(self.constraint, lam)

    def limit_point(self, beta):
        return self(beta)

    def jacobian(self, beta):
        return self.constraint.projector.copy()


class NuclearNorm(ProxOperator):
    """Singular-value thresholding on matrices of a fixed shape.

    Accepts either a matrix of that shape or its row-major flattening and
    returns the same form it was given.
    """

    kind = "nuclear"

    def __init__(self, lam, shape):
        super().__init__(lam)
        self.shape = tuple(int(s) for s in shape)

    def _as_matrix(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.ndim == 1:
            return beta.reshape(self.shape), True
        return beta, False

    def __call__(self, beta):
        M, flat = self._as_matrix(beta)
        out = prox_nuclear(M, self.lam)
        return out.ravel() if flat else out

    def penalty(self, z):
        M, _ = self._as_matrix(z)
        return self.lam * float(np.sum(np.linalg.svd(M, compute_uv=False)))

    def with_lambda(self, lam):
        return NuclearNorm(lam, self.shape)

    def limit_point(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=float))


class GroupRowNorm(ProxOperator):
    """Rowwise (2,1)-norm prox on matrices of a fixed shape; zeroes whole rows."""

    kind = "group_row"

    def __init__(self, lam, shape):
        super().__init__(lam)
        self.shape = tuple(int(s) for s in shape)

    def _as_matrix(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.ndim == 1:
            return beta.reshape(self.shape), True
        return beta, False

    def __call__(self, beta):
        M, flat = self._as_matrix(beta)
        out = prox_group_row(M, self.lam)
        return out.ravel() if flat else out

    def penalty(self, z):
        M, _ = self._as_matrix(z)
        return self.lam * float(np.sum(np.linalg.norm(M, axis=1)))

    def with_lambda(self, lam):
        return GroupRowNorm(lam, self.shape)

    def limit_point(self, beta):
        return np.zeros_like(np.asarray(beta, dtype=float))

    def jacobian(self, beta):
        M, _ = self._as_matrix(beta)
        m, n = M.shape
        J = np.zeros((m * n, m * n))
        for i in range(m):
            r = M[i]
            nrm = np.linalg.norm(r)
            sl = slice(i * n, (i + 1) * n)
            if nrm > self.lam:
                J[sl, sl] = (1.0 - self.lam / nrm) * np.eye(n) + (
                    self.lam / nrm**3
                ) * np.outer(r, r)
        return J


class SetExpansion(ProxOperator):
    """Prox of the distance function to a convex set given by an exact projector.

    ``project_jacobian``, when supplied, is the derivative of the projector
    and enables the closed-form derivative of the whole map away from the
    ``dist = lam`` boundary.
    """

    kind = "set_expansion"

    def __init__(self, lam, project: Callable, project_jacobian: Optional[Callable] = None):
        super().__init__(lam)
        self.project = project
        self.project_jacobian = project_jacobian

    def __call__(self, beta):
        return prox_set_expansion(beta, self.project, self.lam)

    def distance(self, beta):
        beta = np.asarray(beta, dtype=float)
        return float(np.linalg.norm(beta - np.asarray(self.project(beta), dtype=float)))

    def penalty(self, z):
        return self.lam * self.distance(z)

    def with_lambda(self, lam):
        return SetExpansion(lam, self.project, self.project_jacobian)

    def limit_point(self, beta):
        return np.asarray(self.project(beta), dtype=float)

    def jacobian(self, beta):
        if self.project_jacobian is None:
            return None
        beta = _check_finite(beta, "beta")
        p = np.asarray(self.project(beta), dtype=float)
        d = np.linalg.norm(beta - p)
        JP = np.asarray(self.project_jacobian(beta), dtype=float)
        if d < self.lam or d == 0.0:
            return JP.T.copy()
        u = (p - beta) / d
        n = beta.size
        M = np.eye(n) + self.lam * ((JP - np.eye(n)) / d + np.outer(u, u) / d)
        return M.T


class BlockProx(ProxOperator):
    """Apply a different operator to each named contiguous block of a flat vector.

    ``blocks`` is a sequence of ``(name, length, op)`` triples covering the
    vector in order.  The composite is itself a proximal map (the penalty is
    separable across blocks), so non-expansiveness and minimality carry over
    blockwise.
    """

    kind = "block"

    def __init__(self, blocks):
        super().__init__(0.0)
        self.blocks = []
        start = 0
        for name, length, op in blocks:
            sl = slice(start, start + int(length))
            self.blocks.append((name, sl, op))
            start = sl.stop
        self.dim = start

    def slices(self):
        return {name: sl for name, sl, _ in self.blocks}

    def __call__(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.dim,):
            raise InvalidInputError(f"expected a flat vector of length {self.dim}")
        out = np.empty_like(beta)
        for _, sl, op in self.blocks:
            out[sl] = op(beta[sl])
        return out

    def apply_batch(self, B):
        B = np.asarray(B, dtype=float)
        out = np.empty_like(B)
        for _, sl, op in self.blocks:
            out[sl] = op.apply_batch(B[sl])
        return out

    def penalty(self, z):
        z = np.asarray(z, dtype=float)
        total = 0.0
        for _, sl, op in self.blocks:
            pen = op.penalty(z[sl])
            if pen >= INFEASIBLE_SENTINEL:
                return INFEASIBLE_SENTINEL
            total += pen
        return total

    def with_lambda(self, lam):
        return BlockProx(
            [(name, sl.stop - sl.start, op.with_lambda(lam)) for name, sl, op in self.blocks]
        )

    def limit_point(self, beta):
        beta = np.asarray(beta, dtype=float)
        out = np.empty_like(beta)
        for _, sl, op in self.blocks:
            out[sl] = op.limit_point(beta[sl])
        return out

    def jacobian(self, beta):
        beta = np.asarray(beta, dtype=float)
        parts = []
        for _, sl, op in self.blocks:
            J = op.jacobian(beta[sl])
            if J is None:
                return None
            parts.append(J)
        out = np.zeros((self.dim, self.dim))
        for (_, sl, _), J in zip(self.blocks, parts):
            out[sl, sl] = J
        return out


def hyperplane_projector(normal, offset):
    """Projector (and its constant Jacobian) onto ``{x : <normal, x> = offset}``.

    Returns a pair ``(project, jacobian_fn)`` ready for :class:`SetExpansion`.
    """
    a = np.asarray(normal, dtype=float)
    nrm2 = float(a @ a)
    if nrm2 == 0.0:
        raise InvalidInputError("hyperplane normal must be nonzero")
    J = np.eye(a.size) - np.outer(a, a) / nrm2

    def project(x):
        x = np.asarray(x, dtype=float)
        return x - ((a @ x - offset) / nrm2) * a

    return project, lambda _x: J
