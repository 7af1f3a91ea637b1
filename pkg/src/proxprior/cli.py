"""Command-line entry points binding the library into reproducible runs.

Subcommands: ``calibrate``, ``sample``, ``test``, ``flow``, ``summarize``.
Each reads a YAML config (every field defaulted), derives all randomness
from the master seed through the documented stream counters, writes its
outputs into the chosen directory, and echoes the effective config next to
them.  ``PROXPRIOR_THREADS`` sets the default worker count for running
multiple chains.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import calibration, inference, io, models
from .admm import ADMMConfig, FlowProx, FusedL1, first_difference_matrix
from .config import derive_seed, dump_config, load_config, make_config
from .errors import ConfigurationError, DegenerateOperatorError
from .gradients import SPSAConfig
from .inference import HypothesisResult
from .operators import (
    GroupRowNorm,
    NuclearNorm,
    QuadraticRidge,
    SetExpansion,
    SoftThreshold,
    hyperplane_projector,
)
from .sampler import Chain, HMCConfig, diagnostics, run_chains


def _thread_count(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("PROXPRIOR_THREADS")
    return max(1, int(env)) if env else 1


def _sampler_config(section, seed):
    return HMCConfig(
        n_samples=int(section["n_samples"]),
        n_burnin=int(section["n_burnin"]),
        thin=int(section["thin"]),
        step_size=section["step_size"],
        n_leapfrog=int(section["n_leapfrog"]),
        max_tree_depth=int(section["max_tree_depth"]),
        algorithm=section["algorithm"],
        target_accept=float(section["target_accept"]),
        adapt_step_size=bool(section["adapt_step_size"]),
        adapt_mass=bool(section["adapt_mass"]),
        seed=seed,
        spsa=SPSAConfig(epsilon=float(section["spsa_epsilon"]), m=int(section["spsa_m"])),
    )


def combine_chains(chains):
    """Concatenate retained draws; metadata comes from the first chain."""
    first = chains[0]
    if len(chains) == 1:
        return first
    return Chain(
        beta_draws=np.vstack([c.beta_draws for c in chains]),
        theta_draws=np.vstack([c.theta_draws for c in chains]),
        accept_rate=float(np.mean([c.accept_rate for c in chains])),
        energies=np.concatenate([c.energies for c in chains]),
        seed=first.seed,
        lambda_used=first.lambda_used,
        divergences=int(sum(c.divergences for c in chains)),
        algorithm=first.algorithm,
        step_size=first.step_size,
    )


def _calibration_operator(section):
    name = section["operator"]
    dim = int(section["dim"])
    if name == "quadratic":
        return QuadraticRidge(1.0), dim
    if name == "soft_threshold":
        return SoftThreshold(1.0), dim
    if name == "group_row":
        shape = tuple(section["shape"] or (dim, 1))
        return GroupRowNorm(1.0, shape), shape[0] * shape[1]
    if name == "nuclear":
        shape = tuple(section["shape"] or (dim, dim))
        return NuclearNorm(1.0, shape), shape[0] * shape[1]
    if name == "set_expansion":
        hp = section["hyperplane"]
        project, jac = hyperplane_projector(np.asarray(hp["normal"], dtype=float),
                                            float(hp["offset"]))
        return SetExpansion(1.0, project, jac), len(hp["normal"])
    if name == "fused_l1":
        return FusedL1(1.0, first_difference_matrix(dim)), dim
    if name == "flow":
        n = int(section["n_nodes"])
        ratio = float(section["lambda2_ratio"])
        return FlowProx(1.0, ratio, n), n * (n - 1) // 2
    raise ConfigurationError(f"unknown calibration operator {name!r}")


def run_calibrate(cfg):
    """Build a deformation curve and the induced scale-prior plot data."""
    section = cfg["calibrate"]
    outdir = io.ensure_dir(cfg["out"])
    op, dim = _calibration_operator(section)
    mean = float(section["prior"]["mean"])
    sd = float(section["prior"]["sd"])

    def prior_sampler(rng, n):
        return rng.normal(mean, sd, size=(n, dim))

    seed = derive_seed(cfg["seed"], "calibration")
    grid_cfg = section["grid"]
    try:
        if grid_cfg["max"] is None:
            grid = calibration.default_lambda_grid(
                op, prior_sampler, n_grid=int(grid_cfg["points"]),
                seed=seed, lam_min=float(grid_cfg["min"]))
        else:
            grid = np.geomspace(float(grid_cfg["min"]), float(grid_cfg["max"]),
                                int(grid_cfg["points"]))
        curve = calibration.build_curve(op, prior_sampler, grid,
                                        n_mc=int(section["n_mc"]), seed=seed)
    except DegenerateOperatorError as exc:
        raise DegenerateOperatorError(
            f"{exc}  The chosen operator does not respond to its scale; pick an "
            "operator with a finite penalty (e.g. soft_threshold) instead."
        ) from exc

    io.save_curve(os.path.join(outdir, "curve.csv"), curve)

    rng = np.random.default_rng(derive_seed(cfg["seed"], "prior_mc"))
    draws = np.array([
        calibration.sample_lambda(curve, float(section["a_omega"]),
                                  float(section["b_omega"]), rng)
        for _ in range(int(section["n_lambda_draws"]))
    ])
    hist, edges = np.histogram(draws, bins=int(section["density_bins"]), density=True)
    io.write_table(
        os.path.join(outdir, "lambda_density.csv"),
        ["bin_left", "bin_right", "density"],
        [edges[:-1], edges[1:], hist],
    )
    dump_config(cfg, os.path.join(outdir, "config.yaml"))
    return curve


def _load_rows(path):
    _, data = io.read_table(path)
    return data


def _build_test_model(section, master_seed):
    hp = section["hyperplane"]
    normal = np.asarray(hp["normal"], dtype=float)
    offset = float(hp["offset"])
    project, jac = hyperplane_projector(normal, offset)
    if section["data"]:
        y = _load_rows(section["data"])
    else:
        syn = section["synthetic"]
        theta0 = np.asarray(syn["theta0"], dtype=float)
        rng = np.random.default_rng(derive_seed(master_seed, "data"))
        y = rng.normal(theta0, float(section["sigma"]), size=(int(syn["n"]), theta0.size))
    lam = section["lambda"]
    if section["balanced_lambda"]:
        prior = models.GaussianPrior.create(0.0, float(section["prior_sd"]) ** 2, y.shape[1])
        lam = inference.balanced_lambda(project, prior,
                                        n_mc=int(section["prior_mc"]),
                                        seed=derive_seed(master_seed, "prior_mc"))
    elif lam is None:
        raise ConfigurationError("set test.lambda or test.balanced_lambda: true")
    lam = float(lam)
    if lam == 0.0:
        model = models.make_affine_mean_model(
            y, normal.reshape(-1, 1), [offset], sigma=float(section["sigma"]),
            prior_sd=float(section["prior_sd"]))
    else:
        model = models.make_gaussian_mean_model(
            y, float(section["sigma"]), project, lam, project_jacobian=jac,
            prior_sd=float(section["prior_sd"]))
    return model, project, lam, y


def run_test(cfg):
    """End to end: build the membership-test model, sample, estimate the Bayes factor."""
    section = cfg["test"]
    outdir = io.ensure_dir(cfg["out"])
    model, project, lam, y = _build_test_model(section, cfg["seed"])

    sampler_cfg = _sampler_config(section["sampler"], derive_seed(cfg["seed"], "chains"))
    chains = run_chains(model, sampler_cfg, cfg["chains"],
                        max_workers=cfg.get("_threads", 1))
    combined = combine_chains(chains)
    for k, ch in enumerate(chains):
        io.save_chain(os.path.join(outdir, f"chain_{k}"), ch)

    if lam == 0.0:
        dist_theta = inference._distances_to_set(combined.theta_draws, project)
        n_in = int(np.sum(dist_theta < 1e-8))
        result = HypothesisResult(
            np.inf if n_in == len(combined) else 0.0,
            n_in, len(combined) - n_in, 0.0, 1.0, 0.0,
            "infinite" if n_in == len(combined) else "zero")
    else:
        result = inference.bayes_factor_set_expansion(
            combined, model, lam=lam, n_prior_mc=int(section["prior_mc"]),
            seed=derive_seed(cfg["seed"], "prior_mc"), project_C=project)

    dist_beta = inference._distances_to_set(combined.beta_draws, project)
    in_flag = (dist_beta < lam).astype(float) if lam > 0 else np.ones(len(combined))
    io.write_table(
        os.path.join(outdir, "theta_draws.csv"),
        [f"theta_{j}" for j in range(combined.theta_draws.shape[1])] + ["in_set"],
        [combined.theta_draws[:, j] for j in range(combined.theta_draws.shape[1])]
        + [in_flag],
    )
    io.write_keyvalue(os.path.join(outdir, "result.yaml"), {
        "bf01": float(result.bf01) if np.isfinite(result.bf01) else "inf",
        "flag": result.flag,
        "posterior_in": result.posterior_in,
        "posterior_out": result.posterior_out,
        "prior_in": result.prior_in,
        "prior_out": result.prior_out,
        "lambda": result.lam,
        "accept_rate": combined.accept_rate,
    })
    dump_config(cfg, os.path.join(outdir, "config.yaml"))
    return result


def _build_sample_model(section, master_seed):
    kind = section["model"]
    rng = np.random.default_rng(derive_seed(master_seed, "data"))
    if kind == "gaussian_mean":
        hp = section["hyperplane"]
        project, jac = hyperplane_projector(np.asarray(hp["normal"], dtype=float),
                                            float(hp["offset"]))
        if section["data"]:
            y = _load_rows(section["data"])
        else:
            syn = section["synthetic"] or {"theta0": [0.0, 0.0, 0.0], "n": 20}
            theta0 = np.asarray(syn["theta0"], dtype=float)
            y = rng.normal(theta0, float(section["sigma"]), size=(int(syn["n"]), theta0.size))
        return models.make_gaussian_mean_model(
            y, float(section["sigma"]), project, float(section["lambda"]),
            project_jacobian=jac, prior_sd=float(section["prior_sd"]))
    if kind == "sparse_regression":
        if section["data"]:
            data = _load_rows(section["data"])
            X, y = data[:, :-1], data[:, -1]
        else:
            syn = section["synthetic"] or {}
            theta_star = np.asarray(syn.get("theta_star", [2.0, 0.0, 0.0]), dtype=float)
            n = int(syn.get("n", 50))
            X = rng.normal(size=(n, theta_star.size))
            y = X @ theta_star + rng.normal(0.0, float(section["sigma"]), size=n)
        return models.make_sparse_regression_model(
            X, y, float(section["sigma"]), float(section["lambda"]),
            prior_sd=float(section["prior_sd"]))
    if kind == "affine_mean":
        cons = section["constraint"] or {}
        A = np.asarray(cons.get("A", [[1.0], [1.0], [1.0]]), dtype=float)
        b = np.asarray(cons.get("b", [1.0]), dtype=float)
        if section["data"]:
            y = _load_rows(section["data"])
        else:
            syn = section["synthetic"] or {"theta0": [0.0] * A.shape[0], "n": 20}
            theta0 = np.asarray(syn["theta0"], dtype=float)
            y = rng.normal(theta0, float(section["sigma"]), size=(int(syn["n"]), theta0.size))
        return models.make_affine_mean_model(
            y, A, b, sigma=float(section["sigma"]), prior_sd=float(section["prior_sd"]))
    raise ConfigurationError(f"unknown model {kind!r}")


def run_sample(cfg):
    """Fit one of the generic models and write chains plus summaries."""
    section = cfg["sample"]
    outdir = io.ensure_dir(cfg["out"])
    model = _build_sample_model(section, cfg["seed"])
    curve = None
    if section["lambda_curve"]:
        curve = io.load_curve(section["lambda_curve"])
    sampler_section = dict(section["sampler"])
    base = _sampler_config(sampler_section, derive_seed(cfg["seed"], "chains"))
    if section["refresh_lambda"]:
        base = HMCConfig(**{**base.__dict__, "refresh_lambda": True})
    chains = run_chains(model, base, cfg["chains"], curve=curve,
                        a_omega=float(section["a_omega"]),
                        b_omega=float(section["b_omega"]),
                        max_workers=cfg.get("_threads", 1))
    for k, ch in enumerate(chains):
        io.save_chain(os.path.join(outdir, f"chain_{k}"), ch)
    combined = combine_chains(chains)
    io.save_summary(os.path.join(outdir, "summary.csv"),
                    inference.summarize(combined))
    diag = diagnostics(chains)
    io.write_keyvalue(os.path.join(outdir, "diagnostics.yaml"), {
        "min_ess": float(np.min(diag["ess"])),
        "max_rhat": float(np.nanmax(diag["rhat"])) if len(chains) > 0 else None,
        "accept_rate": [float(a) for a in diag["accept_rate"]],
        "divergences": [int(v) for v in diag["divergences"]],
        "n_draws": int(diag["n_draws"]),
    })
    dump_config(cfg, os.path.join(outdir, "config.yaml"))
    return chains


def run_flow(cfg):
    """Fit the flow-network factor model and export its posterior artifacts."""
    section = cfg["flow"]
    outdir = io.ensure_dir(cfg["out"])
    if section["data"]:
        Y = models.read_flow_table(section["data"])
    else:
        syn = section["synthetic"]
        Y, _ = models.synthetic_flow_data(
            int(syn["n_nodes"]), int(syn["T"]), int(syn["n_factors"]),
            seed=derive_seed(cfg["seed"], "data"),
            noise_sd=float(syn["noise_sd"]), cycle_len=int(syn.get("cycle_len", 5)))

    admm = section["admm"]
    model = models.make_flow_factor_model(
        Y, int(section["d"]), float(section["lambda1"]), float(section["lambda2"]),
        float(section["lambda_load"]),
        cfg=ADMMConfig(gamma=float(admm["gamma"]), tol_primal=float(admm["tol_primal"]),
                       tol_dual=float(admm["tol_dual"]), max_iters=int(admm["max_iters"])))

    init = None
    if section["warm_start"] == "svd":
        init = models.svd_warm_start(model, rng=derive_seed(cfg["seed"], "warm_start"))
    sampler_cfg = _sampler_config(section["sampler"], derive_seed(cfg["seed"], "chains"))
    chains = run_chains(model, sampler_cfg, cfg["chains"], init=init,
                        max_workers=cfg.get("_threads", 1))
    combined = combine_chains(chains)
    for k, ch in enumerate(chains):
        io.save_chain(os.path.join(outdir, f"chain_{k}"), ch)

    hist, mode = inference.factor_count_posterior(combined, model,
                                                  threshold=float(section["count_threshold"]))
    io.write_table(os.path.join(outdir, "factor_counts.csv"),
                   ["count", "probability"],
                   [np.arange(hist.size), hist])

    d, T = model.info["d"], model.info["T"]
    sl = model.layout["loadings"]
    load_mean = combined.theta_draws[:, sl].mean(axis=0).reshape(d, T)
    io.write_table(os.path.join(outdir, "loadings.csv"),
                   ["t"] + [f"loading_{l + 1}" for l in range(d)],
                   [np.arange(1, T + 1)] + [load_mean[l] for l in range(d)])

    mode_info = _export_mode_factors(outdir, model, combined, mode,
                                     float(section["count_threshold"]),
                                     float(section["export_tol"]))
    io.save_summary(os.path.join(outdir, "summary.csv"), inference.summarize(combined))
    io.write_keyvalue(os.path.join(outdir, "flow_meta.yaml"), {
        "factor_count_mode": int(mode),
        "factor_count_probs": [float(h) for h in hist],
        "accept_rate": float(combined.accept_rate),
        "divergences": int(combined.divergences),
        **mode_info,
    })
    dump_config(cfg, os.path.join(outdir, "config.yaml"))
    return combined, model, hist, mode


def _export_mode_factors(outdir, model, combined, mode, threshold, export_tol):
    """Pick the best draw with the modal factor count and export its factors.

    The chosen draw's flow blocks are re-evaluated at a tight tolerance so
    the exported networks satisfy node conservation to that accuracy; the
    edge-list file uses the factor number as its time column and re-ingests
    through the standard flow reader.
    """
    info = model.info
    d, T, n = info["d"], info["T"], info["n_nodes"]
    sl = model.layout["loadings"]
    loads = combined.theta_draws[:, sl].reshape(len(combined), d, T)
    counts = np.sum(np.linalg.norm(loads, axis=2) > threshold, axis=1)
    candidates = np.flatnonzero(counts == mode)
    if candidates.size == 0:
        candidates = np.arange(len(combined))
    logps = np.array([
        model.log_lik(combined.theta_draws[i]) + model.beta_prior.logpdf(combined.beta_draws[i])
        for i in candidates
    ])
    best = int(candidates[int(np.argmax(logps))])

    beta_best = combined.beta_draws[best]
    on_rows = np.flatnonzero(np.linalg.norm(loads[best], axis=1) > threshold)
    tight = FlowProx(info["lam1"], info["lam2"], n,
                     ADMMConfig(tol_primal=export_tol, tol_dual=export_tol,
                                max_iters=500_000))
    nets = {}
    for rank, l in enumerate(on_rows, start=1):
        block = beta_best[model.layout[f"flow_{l}"]]
        nets[rank] = tight.evaluate_network(block)

    path = os.path.join(outdir, "factors.csv")
    with open(path, "w") as fh:
        fh.write("t,i,j,flow\n")
        from .admm import lower_pairs

        for rank, net in nets.items():
            for c, (i, j) in enumerate(lower_pairs(n)):
                if abs(net.lower[c]) > 1e-12:
                    fh.write(f"{rank},{i + 1},{j + 1},{net.lower[c]:.17g}\n")
            for j in range(n):
                if abs(net.diag[j]) > 1e-12:
                    fh.write(f"{rank},{j + 1},{j + 1},{net.diag[j]:.17g}\n")

    worst = 0.0
    for net in nets.values():
        off_support = np.abs(net.diag) <= 1e-6
        if off_support.any():
            worst = max(worst, float(np.max(np.abs(net.net_flow()[off_support]))))
    return {"mode_draw_index": best, "exported_factors": len(nets),
            "max_offsupport_conservation_residual": worst}


def run_summarize(cfg):
    section = cfg["summarize"]
    if not section["chain"]:
        raise ConfigurationError("summarize.chain must point at a chain prefix")
    outdir = io.ensure_dir(cfg["out"])
    chain = io.load_chain(section["chain"])
    io.save_summary(os.path.join(outdir, "summary.csv"),
                    inference.summarize(chain, float(section["credible_level"])))
    diag = diagnostics([chain])
    io.write_keyvalue(os.path.join(outdir, "diagnostics.yaml"), {
        "min_ess": float(np.min(diag["ess"])),
        "degenerate_coords": int(np.sum(diag["degenerate"])),
        "accept_rate": float(chain.accept_rate),
        "divergences": int(chain.divergences),
        "n_draws": int(diag["n_draws"]),
    })
    dump_config(cfg, os.path.join(outdir, "config.yaml"))


_RUNNERS = {
    "calibrate": run_calibrate,
    "sample": run_sample,
    "test": run_test,
    "flow": run_flow,
    "summarize": run_summarize,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="proxprior",
        description="Proximal-mapping priors: calibration, sampling, testing, flows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config path (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--chains", type=int, help="number of chains override")
        p.add_argument("--threads", type=int, help="worker threads for chains")
    args = parser.parse_args(argv)

    if args.config:
        cfg = load_config(args.config)
        if cfg["command"] != args.command:
            raise ConfigurationError(
                f"config is for {cfg['command']!r} but {args.command!r} was invoked"
            )
    else:
        cfg = make_config(args.command)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.chains is not None:
        cfg["chains"] = args.chains
    cfg["_threads"] = _thread_count(args)

    _RUNNERS[args.command](cfg)
    print(f"proxprior {args.command}: outputs written to {cfg['out']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
