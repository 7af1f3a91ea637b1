"""Concrete likelihood + proximal-prior bundles.

A :class:`Model` couples a likelihood on the image space with a Gaussian
(or blockwise) prior on the pre-image and a proximal operator connecting
the two.  Its transformed posterior density is simply
``L(y; prox(beta)) * prior(beta)``, so samplers never need the image-space
measure.  Models are immutable after construction and their evaluations are
pure.

Four bundles are provided: a Gaussian mean with a set-expansion prior for
hypothesis testing, sparse linear regression with a soft-threshold prior,
a Gaussian mean constrained to an affine set, and the flow-network factor
model with per-factor feasible-flow proxes and row-sparse loadings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .admm import ADMMConfig, FlowProx, build_flow_constraint_matrix, lower_pairs
from .errors import ConfigurationError, InvalidInputError
from .gradients import SPSAConfig, prox_pullback
from .operators import (
    AffineConstraint,
    AffineProjection,
    BlockProx,
    GroupRowNorm,
    Identity,
    ProxOperator,
    SetExpansion,
    SoftThreshold,
)

_LOGVAR_BOUND = 50.0  # |log sigma^2| beyond this is treated as a divergence


# ---------------------------------------------------------------------------
# priors on the pre-image


@dataclass(frozen=True)
class GaussianPrior:
    """Independent Gaussian coordinates; ``var`` is a scalar or a vector."""

    mean: np.ndarray
    var: np.ndarray
    dim: int

    @classmethod
    def standard(cls, dim):
        return cls.create(0.0, 1.0, dim)

    @classmethod
    def create(cls, mean, var, dim):
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        var = np.broadcast_to(np.asarray(var, dtype=float), (dim,)).copy()
        if np.any(var <= 0):
            raise InvalidInputError("prior variances must be positive")
        return cls(mean, var, dim)

    def logpdf(self, beta):
        beta = np.asarray(beta, dtype=float)
        q = np.sum((beta - self.mean) ** 2 / self.var)
        return -0.5 * (q + np.sum(np.log(2 * np.pi * self.var)))

    def grad(self, beta):
        return -(np.asarray(beta, dtype=float) - self.mean) / self.var

    def sample(self, rng, n=None):
        if n is None:
            return rng.normal(self.mean, np.sqrt(self.var))
        return rng.normal(self.mean, np.sqrt(self.var), size=(n, self.dim))


@dataclass(frozen=True)
class InverseGammaLogVariance:
    """Prior on ``x = log s2`` induced by ``s2 ~ Inverse-Gamma(a, b)``.

    Density in x (including the change-of-variables factor):
    ``a*log b - lgamma(a) - a*x - b*exp(-x)``.
    """

    a: float = 2.0
    b: float = 0.01
    dim: int = 1

    def logpdf(self, x):
        x = float(np.asarray(x).ravel()[0])
        return self.a * math.log(self.b) - math.lgamma(self.a) - self.a * x - self.b * math.exp(-x)

    def grad(self, x):
        x = float(np.asarray(x).ravel()[0])
        return np.array([-self.a + self.b * math.exp(-x)])

    def sample(self, rng, n=None):
        size = None if n is None else (n, 1)
        draws = 1.0 / rng.gamma(self.a, 1.0 / self.b, size=size)
        return np.log(draws) if n is not None else np.array([np.log(draws)])


@dataclass(frozen=True)
class BlockPrior:
    """Independent priors on contiguous blocks of the flat pre-image vector."""

    blocks: tuple
    dim: int

    @classmethod
    def create(cls, parts):
        blocks = []
        start = 0
        for prior in parts:
            sl = slice(start, start + prior.dim)
            blocks.append((sl, prior))
            start = sl.stop
        return cls(tuple(blocks), start)

    def logpdf(self, beta):
        beta = np.asarray(beta, dtype=float)
        return float(sum(prior.logpdf(beta[sl]) for sl, prior in self.blocks))

    def grad(self, beta):
        beta = np.asarray(beta, dtype=float)
        out = np.empty_like(beta)
        for sl, prior in self.blocks:
            out[sl] = prior.grad(beta[sl])
        return out

    def sample(self, rng, n=None):
        if n is None:
            return np.concatenate([np.atleast_1d(prior.sample(rng)) for _, prior in self.blocks])
        cols = [np.atleast_2d(prior.sample(rng, n)) for _, prior in self.blocks]
        return np.hstack(cols)


# ---------------------------------------------------------------------------
# the model bundle


@dataclass
class Model:
    """Likelihood + pre-image prior + proximal operator, with a flat layout.

    ``layout`` maps block names to slices of the flat parameter vector; for
    single-block models it has the one entry ``"beta"``.
    """

    log_lik: Callable
    grad_log_lik: Callable
    prox_op: ProxOperator
    beta_prior: object
    dim: int
    layout: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    _fused_eval: Optional[Callable] = None

    def prox(self, beta):
        return self.prox_op(np.asarray(beta, dtype=float))

    def log_posterior(self, beta):
        beta = np.asarray(beta, dtype=float)
        return float(self.log_lik(self.prox(beta))) + float(self.beta_prior.logpdf(beta))

    def log_posterior_and_grad(self, beta, spsa: SPSAConfig = None, rng=None):
        """Value and gradient sharing a single prox evaluation where possible."""
        beta = np.asarray(beta, dtype=float)
        if self._fused_eval is not None:
            return self._fused_eval(beta, rng)
        spsa = spsa or SPSAConfig()
        theta = self.prox(beta)
        ll = float(self.log_lik(theta))
        grad = prox_pullback(self.prox_op, beta, self.grad_log_lik(theta), spsa, rng)
        grad = grad + self.beta_prior.grad(beta)
        return ll + float(self.beta_prior.logpdf(beta)), grad

    def with_lambda(self, lam):
        if self._fused_eval is not None:
            raise ConfigurationError(
                "this model has block-specific scales; rebuild it instead of rescaling"
            )
        return replace(self, prox_op=self.prox_op.with_lambda(lam))


def _gaussian_loglik_parts(y, sigma):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, p = y.shape
    s2 = float(sigma) ** 2
    ybar = y.mean(axis=0)
    sq = float(np.sum(y * y))

    def log_lik(theta):
        theta = np.asarray(theta, dtype=float)
        return -(sq - 2 * n * ybar @ theta + n * theta @ theta) / (2 * s2)

    def grad_log_lik(theta):
        return n * (ybar - np.asarray(theta, dtype=float)) / s2

    return log_lik, grad_log_lik, n, p


def make_gaussian_mean_model(y, sigma, project_C, lam, project_jacobian=None,
                             prior_mean=0.0, prior_sd=3.0):
    """Gaussian mean with a set-expansion prior toward a convex set.

    ``y`` is (n, p) with known noise scale ``sigma``; the pre-image prior is
    ``N(prior_mean, prior_sd^2 I)``.  Supplying the projector's derivative
    enables closed-form posterior gradients.
    """
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    log_lik, grad_log_lik, _, p = _gaussian_loglik_parts(y, sigma)
    op = SetExpansion(lam, project_C, project_jacobian)
    prior = GaussianPrior.create(prior_mean, prior_sd**2, p)
    return Model(log_lik, grad_log_lik, op, prior, p, layout={"beta": slice(0, p)})


def make_sparse_regression_model(X, y, sigma, lam, prior_sd=1.0):
    """Linear regression with a soft-threshold prior on the coefficients.

    The threshold ``lam`` is typically obtained from a deformation curve;
    the pre-image prior is ``N(0, prior_sd^2 I)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("design matrix contains non-finite values")
    n, p = X.shape
    if y.shape != (n,):
        raise InvalidInputError(f"y must have length {n}, got {y.shape}")
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    s2 = float(sigma) ** 2

    def log_lik(theta):
        r = y - X @ np.asarray(theta, dtype=float)
        return -float(r @ r) / (2 * s2)

    def grad_log_lik(theta):
        return X.T @ (y - X @ np.asarray(theta, dtype=float)) / s2

    op = SoftThreshold(lam)
    prior = GaussianPrior.create(0.0, prior_sd**2, p)
    return Model(log_lik, grad_log_lik, op, prior, p, layout={"beta": slice(0, p)})


def make_affine_mean_model(y, A, b, sigma=1.0, prior_mean=0.0, prior_sd=1.0):
    """Gaussian mean constrained to ``{theta : A^T theta = b}`` by projection.

    With an empty constraint (A of shape (p, 0)) the projection is the
    identity and the model reduces to the unconstrained conjugate setup.
    """
    log_lik, grad_log_lik, _, p = _gaussian_loglik_parts(y, sigma)
    constraint = AffineConstraint(np.asarray(A, dtype=float).reshape(p, -1), b)
    op = AffineProjection(constraint)
    prior = GaussianPrior.create(prior_mean, prior_sd**2, p)
    return Model(log_lik, grad_log_lik, op, prior, p, layout={"beta": slice(0, p)})


# ---------------------------------------------------------------------------
# flow-network factor model


def _observation_map(n_nodes):
    """Map edge vectors to upper-inclusive observation entries.

    Returns (pairs, G) where pairs lists (i, j) with i <= j row-major and
    ``G @ z`` gives the modeled value at each pair: ``-z[(j,i)]`` off the
    diagonal (skew-symmetry) and the net column flow on it.
    """
    C = build_flow_constraint_matrix(n_nodes)
    col_of = {pr: c for c, pr in enumerate(lower_pairs(n_nodes))}
    n_edges = C.shape[1]
    pairs = []
    rows = []
    for i in range(n_nodes):
        for j in range(i, n_nodes):
            pairs.append((i, j))
            if i == j:
                rows.append(C[i].copy())
            else:
                row = np.zeros(n_edges)
                row[col_of[(j, i)]] = -1.0
                rows.append(row)
    return pairs, np.asarray(rows)


def make_flow_factor_model(Y, d, lam1, lam2, lam_load,
                           cfg: ADMMConfig = None,
                           noise_prior=(2.0, 0.01),
                           nonnegative_loadings=False):
    """Latent factor model for dynamic flow networks.

    Each observed network ``Y[t]`` (n_V x n_V, read on entries i <= j) is a
    loading-weighted sum of ``d`` shared feasible-flow factors plus Gaussian
    noise.  The flat parameter packs ``d`` lower-triangular flow blocks, the
    d x T loading pre-image, and the log noise variance; the prox applies
    the feasible-flow operator per block and rowwise group shrinkage to the
    loadings (zeroing whole factors), with an inverse-gamma prior on the
    noise variance.

    Raw data need not be skew-symmetric; only entries with i <= j enter the
    likelihood.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 3 or Y.shape[1] != Y.shape[2]:
        raise InvalidInputError("Y must be (T, n_V, n_V)")
    if d < 1:
        raise InvalidInputError("factor budget d must be >= 1")
    T, n_nodes = Y.shape[0], Y.shape[1]
    cfg = cfg or ADMMConfig(tol_primal=1e-6, tol_dual=1e-6, max_iters=100_000)
    pairs, G = _observation_map(n_nodes)
    n_edges = G.shape[1]
    obs = np.asarray([[Y[t][i, j] for (i, j) in pairs] for t in range(T)])
    n_obs = len(pairs)

    flow_op = FlowProx(lam1, lam2, n_nodes, cfg)
    load_op = GroupRowNorm(lam_load, (d, T))
    if nonnegative_loadings:
        load_op = _NonnegativeGroupRow(lam_load, (d, T))
    blocks = [(f"flow_{l}", n_edges, flow_op) for l in range(d)]
    blocks.append(("loadings", d * T, load_op))
    blocks.append(("log_noise_var", 1, Identity()))
    prox_op = BlockProx(blocks)
    layout = prox_op.slices()
    dim = prox_op.dim

    ig_a, ig_b = noise_prior
    prior = BlockPrior.create(
        [GaussianPrior.standard(d * n_edges), GaussianPrior.standard(d * T),
         InverseGammaLogVariance(ig_a, ig_b)]
    )

    def unpack(vec):
        Z = vec[: d * n_edges].reshape(d, n_edges)
        R = vec[d * n_edges : d * n_edges + d * T].reshape(d, T)
        return Z, R, float(vec[-1])

    def lik_parts(Z, Gam, x):
        s2 = math.exp(x)
        F = Z @ G.T                      # (d, n_obs) modeled per-factor entries
        mean = Gam.T @ F                 # (T, n_obs)
        resid = obs - mean
        ssr = float(np.sum(resid * resid))
        ll = -ssr / (2 * s2) - 0.5 * T * n_obs * math.log(2 * math.pi * s2)
        return ll, F, resid, ssr, s2

    def log_lik(theta):
        theta = np.asarray(theta, dtype=float)
        Z, Gam, x = unpack(theta)
        if abs(x) > _LOGVAR_BOUND:
            return -np.inf
        return lik_parts(Z, Gam, x)[0]

    def grad_log_lik(theta):
        theta = np.asarray(theta, dtype=float)
        Z, Gam, x = unpack(theta)
        if abs(x) > _LOGVAR_BOUND:
            return np.zeros_like(theta)
        _, F, resid, ssr, s2 = lik_parts(Z, Gam, x)
        gZ = (Gam @ resid) @ G / s2
        gGam = F @ resid.T / s2
        gx = ssr / (2 * s2) - 0.5 * T * n_obs
        return np.concatenate([gZ.ravel(), gGam.ravel(), [gx]])

    def fused_eval(beta, rng=None):
        """Value+gradient with one batched flow solve across all factor blocks."""
        Z_pre, R_pre, x = unpack(beta)
        if not np.all(np.isfinite(beta)) or abs(x) > _LOGVAR_BOUND:
            return -np.inf, np.zeros_like(beta)
        try:
            if flow_op.lam == 0.0 and flow_op.lam2 == 0.0:
                W = Z_pre.T.copy()
                X = flow_op.C @ W
            else:
                from .admm import _flow_admm

                W, X, _ = _flow_admm(Z_pre.T.copy(), flow_op.C, flow_op.lam,
                                     flow_op.lam2, cfg, check_every=5)
        except Exception:
            return -np.inf, np.zeros_like(beta)
        Gam = load_op(R_pre.ravel()).reshape(d, T)
        ll, F, resid, ssr, s2 = lik_parts(W.T, Gam, x)
        gZ = (Gam @ resid) @ G / s2
        gGam = F @ resid.T / s2
        gx = ssr / (2 * s2) - 0.5 * T * n_obs
        gb_flow = flow_op.vjp_batch(W, X, gZ.T).T
        gb_load = load_op.jacobian(R_pre.ravel()) @ gGam.ravel()
        logp = ll + prior.logpdf(beta)
        grad = np.concatenate([gb_flow.ravel(), gb_load, [gx]]) + prior.grad(beta)
        return logp, grad

    model = Model(log_lik, grad_log_lik, prox_op, prior, dim, layout=layout,
                  _fused_eval=fused_eval)
    model.info = {
        "kind": "flow_factor",
        "n_nodes": n_nodes,
        "n_edges": n_edges,
        "T": T,
        "d": d,
        "lam1": float(lam1),
        "lam2": float(lam2),
        "lam_load": float(lam_load),
        "observation_map": G,
        "obs": obs,
        "pairs": pairs,
        "flow_op": flow_op,
        "load_op": load_op,
    }
    return model


class _NonnegativeGroupRow(GroupRowNorm):
    """Group-row shrinkage followed by projection onto the nonnegative orthant.

    Optional variant for loadings constrained to be nonnegative; the plain
    shrinkage is the default behavior.
    """

    kind = "group_row_nonnegative"

    def __call__(self, beta):
        return np.maximum(super().__call__(beta), 0.0)

    def apply_batch(self, B):
        return np.maximum(super().apply_batch(B), 0.0)

    def with_lambda(self, lam):
        return _NonnegativeGroupRow(lam, self.shape)

    def jacobian(self, beta):
        J = super().jacobian(beta)
        out = super().__call__(np.asarray(beta, dtype=float))
        return J * (np.asarray(out).ravel() > 0.0)[None, :]


def svd_warm_start(model: Model, rng=None, rel_threshold=0.25, jitter=0.05):
    """Data-informed starting point for flow-factor chains.

    Leading singular components of the (T x n_obs) observation matrix seed
    the loading rows and flow blocks (components below ``rel_threshold`` of
    the top singular value start switched off); the noise coordinate starts
    at a small fraction of the data variance.  Purely an initialization
    aid: the posterior is unchanged.
    """
    if model.info.get("kind") != "flow_factor":
        raise ConfigurationError("svd_warm_start applies to flow-factor models only")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    obs = model.info["obs"]
    G = model.info["observation_map"]
    d, T = model.info["d"], model.info["T"]
    lam_load = model.info["lam_load"]
    n_edges = model.info["n_edges"]

    U, S, Vt = np.linalg.svd(obs, full_matrices=False)
    Z = jitter * rng.normal(size=(d, n_edges))
    R = jitter * rng.normal(size=(d, T))
    for l in range(min(d, S.size)):
        if S[l] < rel_threshold * S[0]:
            break
        s_half = math.sqrt(S[l])
        load = U[:, l] * s_half
        comp = Vt[l] * s_half
        if load.sum() < 0:
            load, comp = -load, -comp
        Z[l], *_ = np.linalg.lstsq(G, comp, rcond=None)
        nrm = np.linalg.norm(load)
        R[l] = load * (1.0 + lam_load / max(nrm, 1e-8))
    x0 = math.log(max(float(np.var(obs)) * 0.05, 1e-4))
    return np.concatenate([Z.ravel(), R.ravel(), [x0]])


# ---------------------------------------------------------------------------
# synthetic flows


def random_cycle_flow(n_nodes, rng, cycle_len=5, magnitude=None):
    """Lower-triangular edge vector of a single directed cycle.

    Cycles conserve flow at every node with zero external in/out-flow, so
    they are feasible by construction.
    """
    cycle_len = min(cycle_len, n_nodes)
    nodes = rng.choice(n_nodes, size=cycle_len, replace=False)
    mag = float(magnitude) if magnitude is not None else float(rng.uniform(0.8, 1.5))
    col_of = {pr: c for c, pr in enumerate(lower_pairs(n_nodes))}
    z = np.zeros(n_nodes * (n_nodes - 1) // 2)
    for a, b in zip(nodes, np.roll(nodes, -1)):
        a, b = int(a), int(b)
        if a > b:
            z[col_of[(a, b)]] += mag
        else:
            z[col_of[(b, a)]] -= mag
    return z


def synthetic_flow_data(n_nodes, T, n_factors, seed=0, noise_sd=0.1, cycle_len=5):
    """Simulated dynamic networks from cycle factors with ramped loadings.

    Returns ``(Y, truth)`` where Y is (T, n_V, n_V) raw data (upper-inclusive
    entries carry the noise, the lower triangle mirrors them) and truth
    holds the generating edge vectors and loading matrix.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C = build_flow_constraint_matrix(n_nodes)
    factors = [random_cycle_flow(n_nodes, rng, cycle_len) for _ in range(n_factors)]
    loadings = np.empty((n_factors, T))
    for l in range(n_factors):
        start, end = rng.uniform(0.4, 2.2, size=2)
        loadings[l] = np.linspace(start, end, T)
    pairs = lower_pairs(n_nodes)
    Y = np.zeros((T, n_nodes, n_nodes))
    iu = np.triu_indices(n_nodes)
    il = np.tril_indices(n_nodes, -1)
    for t in range(T):
        F = np.zeros((n_nodes, n_nodes))
        for l in range(n_factors):
            M = np.zeros((n_nodes, n_nodes))
            for c, (i, j) in enumerate(pairs):
                M[i, j] = factors[l][c]
                M[j, i] = -factors[l][c]
            np.fill_diagonal(M, C @ factors[l])
            F += loadings[l, t] * M
        noisy = F.copy()
        noisy[iu] = F[iu] + rng.normal(0.0, noise_sd, size=len(iu[0]))
        noisy[il] = -noisy.T[il]
        Y[t] = noisy
    return Y, {"factors": np.asarray(factors), "loadings": loadings, "noise_sd": noise_sd}


# ---------------------------------------------------------------------------
# flow data files


def read_flow_table(path, n_nodes=None):
    """Read (t, i, j, flow) rows into a (T, n_V, n_V) array.

    Node indices are 1-based in files.  Files holding only i >= j rows are
    feasible-flow inputs (the upper triangle is mirrored with a sign flip);
    files with both orientations are raw data and are antisymmetrized off
    the diagonal, keeping the diagonal as given.
    """
    rows = []
    with open(path) as fh:
        header = fh.readline()
        if header.strip().lower().replace(" ", "") not in ("t,i,j,flow",):
            raise InvalidInputError(f"unexpected flow table header: {header.strip()!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise InvalidInputError(f"line {line_no}: expected 4 columns")
            try:
                t, i, j = int(parts[0]), int(parts[1]), int(parts[2])
                flow = float(parts[3])
            except ValueError as exc:
                raise InvalidInputError(f"line {line_no}: non-integer node index or bad flow "
                                        f"({exc})") from exc
            if t < 1 or i < 1 or j < 1:
                raise InvalidInputError(f"line {line_no}: indices are 1-based and positive")
            if not np.isfinite(flow):
                raise InvalidInputError(f"line {line_no}: non-finite flow")
            rows.append((t - 1, i - 1, j - 1, flow))
    if not rows:
        raise InvalidInputError("flow table has no data rows")
    T = 1 + max(r[0] for r in rows)
    n = n_nodes or (1 + max(max(r[1] for r in rows), max(r[2] for r in rows)))
    Y = np.zeros((T, n, n))
    seen_upper = False
    for t, i, j, flow in rows:
        Y[t, i, j] = flow
        seen_upper = seen_upper or i < j
    if seen_upper:
        # raw data: antisymmetrize off the diagonal, keep the diagonal
        for t in range(T):
            diag = np.diag(Y[t]).copy()
            Y[t] = (Y[t] - Y[t].T) / 2.0
            np.fill_diagonal(Y[t], diag)
    else:
        for t in range(T):
            Y[t] = Y[t] - np.triu(Y[t].T, 1)
    return Y


def write_flow_table(path, Y):
    """Write a (T, n_V, n_V) array as feasible-style (t, i, j, flow) rows.

    Emits the lower triangle and the diagonal with 1-based indices; zero
    entries are skipped.
    """
    Y = np.asarray(Y, dtype=float)
    with open(path, "w") as fh:
        fh.write("t,i,j,flow\n")
        for t in range(Y.shape[0]):
            for i in range(Y.shape[1]):
                for j in range(i + 1):
                    if Y[t, i, j] != 0.0:
                        fh.write(f"{t + 1},{i + 1},{j + 1},{Y[t, i, j]:.17g}\n")
