"""Hamiltonian Monte Carlo over the pre-image coordinates.

The target density is the transformed posterior
``log L(y; prox(beta)) + log prior(beta)``; trajectories are simulated with
the leapfrog integrator and corrected by a Metropolis-Hastings step.  Two
trajectory rules are available: a fixed number of leapfrog steps ("hmc") and
the doubling-tree no-U-turn rule with slice acceptance ("nuts", the default).
Step sizes adapt by dual averaging during burn-in.

Image-space draws are materialized after sampling by pushing every retained
pre-image draw through the model's prox, keeping the pre-image chain the
single source of truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .calibration import DeformationCurve, sample_lambda
from .errors import ChainFailureError, DivergentTrajectoryError, InvalidInputError
from .gradients import SPSAConfig


@dataclass(frozen=True)
class HMCConfig:
    """Sampler settings; ``n_samples`` counts all iterations including burn-in."""

    n_samples: int = 2000
    n_burnin: int = 500
    thin: int = 1
    step_size: Optional[float] = 0.1
    n_leapfrog: int = 10
    max_tree_depth: int = 10
    algorithm: str = "nuts"
    target_accept: float = 0.8
    adapt_step_size: bool = True
    adapt_mass: bool = False
    mass: Optional[np.ndarray] = None
    divergence_threshold: float = 1000.0
    refresh_lambda: bool = False
    seed: int = 0
    spsa: SPSAConfig = field(default_factory=SPSAConfig)

    def __post_init__(self):
        if self.n_samples < 1 or self.n_burnin < 0 or self.n_burnin >= self.n_samples:
            raise InvalidInputError("need 0 <= n_burnin < n_samples")
        if self.thin < 1:
            raise InvalidInputError("thin must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidInputError("step_size must be positive")
        if self.n_leapfrog < 1 or self.max_tree_depth < 1:
            raise InvalidInputError("trajectory lengths must be positive")
        if not (0 < self.target_accept < 1):
            raise InvalidInputError("target_accept must be in (0, 1)")
        if self.algorithm not in ("nuts", "hmc"):
            raise InvalidInputError(f"unknown algorithm {self.algorithm!r}")


@dataclass
class Chain:
    """Seeded sampler output; equal-length draw arrays plus run metadata."""

    beta_draws: np.ndarray
    theta_draws: np.ndarray
    accept_rate: float
    energies: np.ndarray
    seed: int
    lambda_used: object = None
    divergences: int = 0
    algorithm: str = "nuts"
    step_size: float = float("nan")

    def __post_init__(self):
        if len(self.beta_draws) != len(self.theta_draws) or len(self.beta_draws) != len(
            self.energies
        ):
            raise InvalidInputError("draw sequences must have equal lengths")
        if not (0.0 <= self.accept_rate <= 1.0):
            raise InvalidInputError("accept_rate must be in [0, 1]")

    def __len__(self):
        return len(self.beta_draws)


# ---------------------------------------------------------------------------
# integrator


def leapfrog(beta, v, grad_fn, eps, L, mass=None):
    """L half-kick / drift / half-kick cycles; raises on non-finite states.

    ``mass`` is the diagonal of the momentum covariance; drift uses velocity
    ``v / mass``.  The scheme is reversible: integrating the returned state
    with negated momentum retraces the trajectory.
    """
    beta = np.asarray(beta, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    mass = np.ones_like(beta) if mass is None else np.asarray(mass, dtype=float)
    g = np.asarray(grad_fn(beta), dtype=float)
    if not np.all(np.isfinite(g)):
        raise DivergentTrajectoryError("non-finite gradient at trajectory start")
    for step in range(L):
        v = v + 0.5 * eps * g
        beta = beta + eps * v / mass
        if not np.all(np.isfinite(beta)):
            raise DivergentTrajectoryError("non-finite position during leapfrog")
        g = np.asarray(grad_fn(beta), dtype=float)
        if not np.all(np.isfinite(g)):
            raise DivergentTrajectoryError("non-finite gradient during leapfrog")
        v = v + 0.5 * eps * g
    return beta, v


def _kinetic(v, mass):
    return 0.5 * float(np.sum(v * v / mass))


@dataclass
class _State:
    beta: np.ndarray
    logp: float
    grad: np.ndarray


def _make_state(model, beta, cfg, rng):
    logp, grad = model.log_posterior_and_grad(beta, cfg.spsa, rng)
    return _State(np.asarray(beta, dtype=float), logp, grad)


def hmc_step(state, model, cfg: HMCConfig, rng, step_size=None, mass=None, trace=None):
    """One fixed-length trajectory plus Metropolis-Hastings correction.

    Returns ``(state', info)`` where info records acceptance, the acceptance
    probability, both Hamiltonians, and whether the trajectory diverged.
    Divergent trajectories (non-finite states or energy error beyond the
    configured threshold) are rejected automatically.
    """
    eps = cfg.step_size if step_size is None else step_size
    p = state.beta.size
    mass = np.ones(p) if mass is None else mass
    v0 = rng.normal(size=p) * np.sqrt(mass)
    H0 = -state.logp + _kinetic(v0, mass)

    beta, v, grad = state.beta.copy(), v0.copy(), state.grad.copy()
    logp_new = -np.inf
    divergent = False
    try:
        for _ in range(cfg.n_leapfrog):
            v = v + 0.5 * eps * grad
            beta = beta + eps * v / mass
            if not np.all(np.isfinite(beta)):
                raise DivergentTrajectoryError("non-finite position")
            logp_new, grad = model.log_posterior_and_grad(beta, cfg.spsa, rng)
            if not np.all(np.isfinite(grad)) or not np.isfinite(logp_new):
                raise DivergentTrajectoryError("non-finite state")
            v = v + 0.5 * eps * grad
        H1 = -logp_new + _kinetic(v, mass)
        if not np.isfinite(H1) or abs(H1 - H0) > cfg.divergence_threshold:
            divergent = True
            alpha = 0.0
        else:
            alpha = min(1.0, float(np.exp(min(0.0, H0 - H1))))
    except DivergentTrajectoryError:
        H1 = np.inf
        divergent = True
        alpha = 0.0

    accepted = bool(rng.uniform() < alpha)
    if accepted:
        state = _State(beta, logp_new, grad)
    info = {"accepted": accepted, "alpha": alpha, "H0": H0, "H1": H1, "divergent": divergent}
    if trace is not None:
        trace.append(info)
    return state, info


# ---------------------------------------------------------------------------
# no-U-turn trajectories


def _nuts_draw(state, model, cfg, rng, eps, mass):
    """One doubling-tree iteration; returns (state', info)."""
    p = state.beta.size
    v0 = rng.normal(size=p) * np.sqrt(mass)
    H0 = -state.logp + _kinetic(v0, mass)
    log_u = -H0 - rng.exponential()

    stats = {"alpha_sum": 0.0, "n_alpha": 0, "divergent": False}

    def build(beta, v, grad, direction, depth):
        """Returns (minus, plus, proposal, n, keep_going); nodes are (beta, v, grad, logp)."""
        if depth == 0:
            try:
                v1 = v + 0.5 * direction * eps * grad
                beta1 = beta + direction * eps * v1 / mass
                if not np.all(np.isfinite(beta1)):
                    raise DivergentTrajectoryError("non-finite position")
                logp1, grad1 = model.log_posterior_and_grad(beta1, cfg.spsa, rng)
                if not np.isfinite(logp1) or not np.all(np.isfinite(grad1)):
                    raise DivergentTrajectoryError("non-finite state")
                v1 = v1 + 0.5 * direction * eps * grad1
            except DivergentTrajectoryError:
                stats["divergent"] = True
                stats["n_alpha"] += 1
                return None, None, None, 0, False
            H = -logp1 + _kinetic(v1, mass)
            n_here = 1 if log_u <= -H else 0
            keep = log_u < -H + cfg.divergence_threshold
            if not keep:
                stats["divergent"] = True
            stats["alpha_sum"] += min(1.0, float(np.exp(min(0.0, H0 - H))))
            stats["n_alpha"] += 1
            node = (beta1, v1, grad1, logp1)
            return node, node, node, n_here, keep
        minus, plus, prop, n1, keep = build(beta, v, grad, direction, depth - 1)
        if not keep:
            return minus, plus, prop, n1, False
        if direction == -1:
            minus, _, prop2, n2, keep2 = build(*minus[:3], direction, depth - 1)
        else:
            _, plus, prop2, n2, keep2 = build(*plus[:3], direction, depth - 1)
        if keep2 and n2 > 0 and rng.uniform() < n2 / max(n1 + n2, 1):
            prop = prop2
        keep = keep2 and _no_u_turn(minus, plus, mass)
        return minus, plus, prop, n1 + n2, keep

    node0 = (state.beta, v0, state.grad, state.logp)
    minus = plus = node0
    proposal = node0
    n_total = 1
    depth = 0
    keep_going = True
    while keep_going and depth < cfg.max_tree_depth:
        direction = -1 if rng.uniform() < 0.5 else 1
        if direction == -1:
            minus, _, prop, n_new, keep = build(*minus[:3], direction, depth)
        else:
            _, plus, prop, n_new, keep = build(*plus[:3], direction, depth)
        if keep and n_new > 0 and rng.uniform() < n_new / n_total:
            proposal = prop
        n_total += n_new
        keep_going = keep and minus is not None and plus is not None and _no_u_turn(
            minus, plus, mass
        )
        depth += 1

    accepted = proposal is not node0
    if accepted:
        state = _State(
            np.asarray(proposal[0], dtype=float), float(proposal[3]), np.asarray(proposal[2])
        )
    alpha = stats["alpha_sum"] / max(stats["n_alpha"], 1)
    info = {
        "accepted": accepted,
        "alpha": alpha,
        "H0": H0,
        "H1": np.nan,
        "divergent": stats["divergent"],
    }
    return state, info


def _no_u_turn(minus, plus, mass):
    if minus is None or plus is None:
        return False
    dbeta = plus[0] - minus[0]
    return (dbeta @ (minus[1] / mass)) >= 0 and (dbeta @ (plus[1] / mass)) >= 0


# ---------------------------------------------------------------------------
# adaptation


class _DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, alpha):
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - alpha)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    def finalize(self):
        return float(np.exp(self.log_eps_bar))


def find_reasonable_epsilon(model, state, cfg, rng, mass):
    """Double or halve a unit step until the one-step acceptance crosses 1/2."""
    eps = 1.0
    p = state.beta.size
    v = rng.normal(size=p) * np.sqrt(mass)
    H0 = -state.logp + _kinetic(v, mass)

    def one_step(eps):
        try:
            v1 = v + 0.5 * eps * state.grad
            b1 = state.beta + eps * v1 / mass
            logp1, g1 = model.log_posterior_and_grad(b1, cfg.spsa, rng)
            v1 = v1 + 0.5 * eps * g1
            if not np.isfinite(logp1):
                return -np.inf
            return H0 - (-logp1 + _kinetic(v1, mass))
        except Exception:
            return -np.inf

    log_ratio = one_step(eps)
    direction = 1.0 if log_ratio > np.log(0.5) else -1.0
    for _ in range(50):
        eps *= 2.0**direction
        log_ratio = one_step(eps)
        if direction * log_ratio <= direction * np.log(0.5):
            break
    return eps


# ---------------------------------------------------------------------------
# full runs


def nuts_run(model, cfg: HMCConfig, curve: DeformationCurve = None,
             a_omega=1.0, b_omega=1.0, init=None) -> Chain:
    """Run one chain and return it with burn-in dropped and thinning applied.

    When a deformation curve is supplied, the prox scale is drawn once per
    chain from the induced prior (or refreshed every iteration when the
    config asks for it) before sampling starts.  Image-space draws are
    computed at the end by pushing retained pre-image draws through the
    model's prox.
    """
    rng = np.random.default_rng(cfg.seed)

    lambda_used = getattr(model.prox_op, "lam", None)
    if curve is not None and not cfg.refresh_lambda:
        lambda_used = sample_lambda(curve, a_omega, b_omega, rng)
        model = model.with_lambda(lambda_used)

    beta0 = model.beta_prior.sample(rng) if init is None else np.asarray(init, dtype=float)
    state = _make_state(model, beta0, cfg, rng)
    mass = np.ones(state.beta.size) if cfg.mass is None else np.asarray(cfg.mass, dtype=float)

    eps = cfg.step_size
    if eps is None:
        eps = find_reasonable_epsilon(model, state, cfg, rng, mass)
    adapter = _DualAveraging(eps, cfg.target_accept) if cfg.adapt_step_size else None

    lambdas_seen = []
    retained_beta = []
    retained_H = []
    accept_sum = 0.0
    post_iters = 0
    divergences = 0
    adapt_window = []

    for it in range(cfg.n_samples):
        if curve is not None and cfg.refresh_lambda:
            lam_it = sample_lambda(curve, a_omega, b_omega, rng)
            lambdas_seen.append(lam_it)
            model_it = model.with_lambda(lam_it)
            state = _make_state(model_it, state.beta, cfg, rng)
        else:
            model_it = model

        if cfg.algorithm == "hmc":
            state, info = hmc_step(state, model_it, cfg, rng, step_size=eps, mass=mass)
        else:
            state, info = _nuts_draw(state, model_it, cfg, rng, eps, mass)

        if it < cfg.n_burnin:
            if adapter is not None:
                eps = adapter.update(info["alpha"])
            if cfg.adapt_mass and it >= cfg.n_burnin // 2:
                adapt_window.append(state.beta.copy())
            if it == cfg.n_burnin - 1:
                if adapter is not None:
                    eps = adapter.finalize()
                if cfg.adapt_mass and len(adapt_window) >= 10:
                    var = np.var(np.asarray(adapt_window), axis=0)
                    mass = 1.0 / np.clip(var, 1e-6, 1e6)
        else:
            post_iters += 1
            accept_sum += info["alpha"] if cfg.algorithm == "nuts" else info["accepted"]
            divergences += int(info["divergent"])
            if (it - cfg.n_burnin) % cfg.thin == 0:
                retained_beta.append(state.beta.copy())
                retained_H.append(info["H0"])

    if post_iters > 0 and divergences > 0.5 * post_iters:
        raise ChainFailureError(
            f"{divergences}/{post_iters} post-burn-in iterations diverged; "
            "the chain is unreliable (reduce the step size)"
        )

    beta_draws = np.asarray(retained_beta)
    theta_draws = model.prox_op.apply_batch(beta_draws.T).T if len(beta_draws) else beta_draws
    if curve is not None and cfg.refresh_lambda:
        lambda_used = lambdas_seen
    return Chain(
        beta_draws=beta_draws,
        theta_draws=np.asarray(theta_draws),
        accept_rate=float(accept_sum / max(post_iters, 1)),
        energies=np.asarray(retained_H),
        seed=cfg.seed,
        lambda_used=lambda_used,
        divergences=divergences,
        algorithm=cfg.algorithm,
        step_size=float(eps),
    )


def run_chains(model, cfg: HMCConfig, n_chains, curve=None, a_omega=1.0, b_omega=1.0,
               init=None, max_workers=1):
    """Run several chains with independent seed-derived streams.

    Chains are deterministic functions of ``(cfg.seed, chain index)``; the
    optional thread pool changes wall time only, never the results.
    """
    configs = [
        replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0]))
        for k in range(n_chains)
    ]
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(nuts_run, model, c, curve, a_omega, b_omega, init)
                for c in configs
            ]
            return [f.result() for f in futures]
    return [nuts_run(model, c, curve, a_omega, b_omega, init) for c in configs]


# ---------------------------------------------------------------------------
# diagnostics


def _ess_initial_monotone(x):
    """Effective sample size by Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0 or n < 4:
        return 0.0, True
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f))[:n].real / n
    rho = acov / acov[0]
    pair_sums = []
    k = 0
    while 2 * k + 1 < n:
        g = rho[2 * k] + rho[2 * k + 1]
        if g <= 0:
            break
        if pair_sums and g > pair_sums[-1]:
            g = pair_sums[-1]  # enforce monotone decrease
        pair_sums.append(g)
        k += 1
    tau = -1.0 + 2.0 * float(np.sum(pair_sums)) if pair_sums else 1.0
    tau = max(tau, 1.0 / n)
    return n / tau, False


def _split_rhat(per_chain):
    """Split-half potential scale reduction for one coordinate."""
    halves = []
    for x in per_chain:
        h = len(x) // 2
        if h < 2:
            return np.nan
        halves.extend([x[:h], x[h : 2 * h]])
    halves = np.asarray(halves, dtype=float)
    m, n = halves.shape
    means = halves.mean(axis=1)
    W = float(np.mean(halves.var(axis=1, ddof=1)))
    B = n * float(np.var(means, ddof=1))
    if W == 0:
        return np.nan
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def diagnostics(chains):
    """Per-coordinate ESS and split R-hat plus acceptance and divergence totals.

    All chains must have the same number of retained draws; constant
    coordinates are flagged degenerate rather than given a fake ESS.
    """
    if isinstance(chains, Chain):
        chains = [chains]
    if not chains:
        raise InvalidInputError("need at least one chain")
    lengths = {len(c) for c in chains}
    if len(lengths) != 1:
        raise InvalidInputError("chains must have equal numbers of retained draws")
    p = chains[0].beta_draws.shape[1]
    ess = np.zeros(p)
    degenerate = np.zeros(p, dtype=bool)
    rhat = np.full(p, np.nan)
    for j in range(p):
        total = 0.0
        flag = False
        for c in chains:
            e, bad = _ess_initial_monotone(c.beta_draws[:, j])
            total += e
            flag = flag or bad
        ess[j] = total
        degenerate[j] = flag
        rhat[j] = _split_rhat([c.beta_draws[:, j] for c in chains])
    return {
        "ess": ess,
        "rhat": rhat,
        "degenerate": degenerate,
        "accept_rate": np.array([c.accept_rate for c in chains]),
        "divergences": np.array([c.divergences for c in chains]),
        "n_draws": len(chains[0]),
    }
