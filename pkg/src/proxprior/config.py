"""Run configuration: schema-tagged YAML with defaults and seed streams.

A config file is a nested mapping with a ``schema`` tag, a ``command``, a
master ``seed``, and one section per command.  Every field has a default, so
the effective (fully merged) config is serializable and is echoed next to
the outputs; two runs with equal effective configs produce byte-identical
files.

All randomness derives from the master seed through fixed counter-based
splitting (``SeedSequence([master, counter])``):

===============  =======
stream           counter
===============  =======
synthetic data   0
calibration      1
prior MC         2
warm start       3
chains           10  (chain k then splits as [chain_seed, k])
===============  =======
"""

from __future__ import annotations

import copy

import numpy as np
import yaml

from .errors import ConfigurationError

SCHEMA = "proxprior/1"

STREAMS = {"data": 0, "calibration": 1, "prior_mc": 2, "warm_start": 3, "chains": 10}

_SAMPLER_DEFAULTS = {
    "n_samples": 5000,
    "n_burnin": 1000,
    "thin": 1,
    "algorithm": "nuts",
    "step_size": 0.1,
    "n_leapfrog": 10,
    "max_tree_depth": 10,
    "target_accept": 0.8,
    "adapt_step_size": True,
    "adapt_mass": False,
    "spsa_m": 20,
    "spsa_epsilon": 1e-7,
}

DEFAULTS = {
    "calibrate": {
        "operator": "quadratic",
        "dim": 1,
        "shape": None,
        "n_nodes": 4,
        "lambda2_ratio": 1.0,
        "hyperplane": {"normal": [1.0, 1.0, 1.0], "offset": 1.0},
        "prior": {"mean": 0.0, "sd": 1.0},
        "grid": {"min": 1e-3, "max": None, "points": 50},
        "n_mc": 100_000,
        "a_omega": 1.0,
        "b_omega": 1.0,
        "n_lambda_draws": 100_000,
        "density_bins": 60,
    },
    "test": {
        "hyperplane": {"normal": [1.0, 1.0, 1.0], "offset": 1.0},
        "lambda": 2.0,
        "balanced_lambda": False,
        "sigma": 3.0,
        "prior_sd": 3.0,
        "data": None,
        "synthetic": {"theta0": [-0.5, 0.3, 1.2], "n": 20},
        "prior_mc": 100_000,
        "sampler": dict(_SAMPLER_DEFAULTS, n_samples=7000, n_burnin=2000),
    },
    "sample": {
        "model": "gaussian_mean",
        "data": None,
        "synthetic": None,
        "sigma": 1.0,
        "prior_sd": 1.0,
        "lambda": 1.0,
        "lambda_curve": None,
        "a_omega": 1.0,
        "b_omega": 1.0,
        "refresh_lambda": False,
        "hyperplane": {"normal": [1.0, 1.0, 1.0], "offset": 1.0},
        "constraint": None,
        "sampler": dict(_SAMPLER_DEFAULTS),
    },
    "flow": {
        "data": None,
        "synthetic": {"n_nodes": 10, "T": 8, "n_factors": 2, "noise_sd": 0.1,
                      "cycle_len": 5},
        "d": 6,
        "lambda1": 0.15,
        "lambda2": 0.25,
        "lambda_load": 4.0,
        "admm": {"gamma": 1.0, "tol_primal": 1e-6, "tol_dual": 1e-6,
                 "max_iters": 100_000},
        "warm_start": "svd",
        "count_threshold": 1e-6,
        "export_tol": 1e-8,
        "sampler": dict(_SAMPLER_DEFAULTS, algorithm="hmc", n_samples=1200,
                        n_burnin=500, n_leapfrog=8, step_size=0.05,
                        target_accept=0.75, thin=2),
    },
    "summarize": {
        "chain": None,
        "credible_level": 0.95,
    },
}

_TOP_DEFAULTS = {"seed": 0, "out": "proxprior_out", "chains": 1}


def derive_seed(master, stream):
    """Deterministic child seed for one of the documented streams."""
    counter = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return int(np.random.SeedSequence([int(master), counter]).generate_state(1)[0])


def _merge(defaults, override):
    out = copy.deepcopy(defaults)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def make_config(command, overrides=None, seed=None, out=None, chains=None):
    """Effective config for ``command`` with defaults filled in."""
    if command not in DEFAULTS:
        raise ConfigurationError(f"unknown command {command!r}")
    cfg = {"schema": SCHEMA, "command": command}
    cfg.update(copy.deepcopy(_TOP_DEFAULTS))
    cfg[command] = _merge(DEFAULTS[command], (overrides or {}).get(command, overrides or {}))
    for key in _TOP_DEFAULTS:
        if overrides and key in overrides:
            cfg[key] = copy.deepcopy(overrides[key])
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    if chains is not None:
        cfg["chains"] = int(chains)
    return cfg


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} does not hold a mapping")
    if raw.get("schema", SCHEMA) != SCHEMA:
        raise ConfigurationError(f"unsupported schema {raw.get('schema')!r}")
    command = raw.get("command")
    if command not in DEFAULTS:
        raise ConfigurationError(f"config must set command to one of {sorted(DEFAULTS)}")
    section = raw.get(command, {})
    return make_config(
        command,
        overrides={command: section},
        seed=raw.get("seed"),
        out=raw.get("out"),
        chains=raw.get("chains"),
    )


def dump_config(cfg, path):
    public = {k: v for k, v in cfg.items() if not str(k).startswith("_")}
    with open(path, "w") as fh:
        fh.write(f"# proxprior config ({SCHEMA})\n")
        yaml.safe_dump(public, fh, sort_keys=False, default_flow_style=False)
