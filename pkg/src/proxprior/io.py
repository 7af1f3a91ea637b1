"""Tabular and key-value file helpers.

All floating-point columns are written with 17 significant digits so that
every emitted file parses back to bit-identical values, and repeated runs
with equal seeds produce byte-identical output.
"""

from __future__ import annotations

import os

import numpy as np
import yaml

from .calibration import DeformationCurve
from .errors import InvalidInputError
from .sampler import Chain

_FLOAT_FMT = "%.17g"


def write_table(path, header, columns):
    """Write named columns as CSV with full float precision."""
    columns = [np.asarray(c) for c in columns]
    if len(header) != len(columns):
        raise InvalidInputError("header and column counts differ")
    n = len(columns[0])
    if any(len(c) != n for c in columns):
        raise InvalidInputError("columns must have equal lengths")
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for irow in range(n):
            cells = []
            for col in columns:
                v = col[irow]
                if isinstance(v, (float, np.floating)):
                    cells.append(_FLOAT_FMT % v)
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")


def read_table(path):
    """Read a CSV written by :func:`write_table`; returns (header, 2-D array)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array([[float(x) for x in row] for row in rows]) if rows else np.empty((0, len(header)))
    return header, data


def write_keyvalue(path, mapping, schema="proxprior/1"):
    """Write a nested mapping as schema-tagged YAML, preserving key order."""
    doc = {"schema": schema}
    doc.update(mapping)
    with open(path, "w") as fh:
        fh.write("# proxprior structured key-value file\n")
        yaml.safe_dump(doc, fh, sort_keys=False, default_flow_style=False)


def read_keyvalue(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise InvalidInputError(f"{path} does not hold a mapping")
    return doc


# ---------------------------------------------------------------------------
# domain objects


def save_curve(path, curve: DeformationCurve):
    """Two-column (lambda, omega) table with a header line."""
    write_table(path, ["lambda", "omega"], [curve.lambdas, curve.omegas])


def load_curve(path, n_mc=0, seed=None) -> DeformationCurve:
    header, data = read_table(path)
    if header != ["lambda", "omega"]:
        raise InvalidInputError(f"not a deformation-curve table: header {header}")
    return DeformationCurve(data[:, 0], data[:, 1], n_mc, seed)


def save_chain(prefix, chain: Chain, extra_meta=None):
    """Write ``<prefix>.csv`` (draws) and ``<prefix>_meta.yaml`` (run metadata).

    One row per retained draw: pre-image coordinates first, then image
    coordinates, then the recorded energy.
    """
    p = chain.beta_draws.shape[1] if len(chain) else 0
    header = [f"beta_{j}" for j in range(p)] + [f"theta_{j}" for j in range(p)] + ["energy"]
    columns = (
        [chain.beta_draws[:, j] for j in range(p)]
        + [chain.theta_draws[:, j] for j in range(p)]
        + [chain.energies]
    )
    write_table(f"{prefix}.csv", header, columns)
    lam = chain.lambda_used
    if isinstance(lam, (list, np.ndarray)):
        lam = [float(v) for v in lam]
    elif lam is not None:
        lam = float(lam)
    meta = {
        "seed": int(chain.seed),
        "algorithm": chain.algorithm,
        "accept_rate": float(chain.accept_rate),
        "divergences": int(chain.divergences),
        "step_size": float(chain.step_size),
        "lambda": lam,
        "n_draws": len(chain),
        "dim": p,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_keyvalue(f"{prefix}_meta.yaml", meta)


def load_chain(prefix) -> Chain:
    header, data = read_table(f"{prefix}.csv")
    meta = read_keyvalue(f"{prefix}_meta.yaml")
    p = int(meta["dim"])
    expected = [f"beta_{j}" for j in range(p)] + [f"theta_{j}" for j in range(p)] + ["energy"]
    if header != expected:
        raise InvalidInputError("chain table does not match its metadata")
    return Chain(
        beta_draws=data[:, :p],
        theta_draws=data[:, p : 2 * p],
        accept_rate=float(meta["accept_rate"]),
        energies=data[:, -1],
        seed=int(meta["seed"]),
        lambda_used=meta.get("lambda"),
        divergences=int(meta.get("divergences", 0)),
        algorithm=meta.get("algorithm", "nuts"),
        step_size=float(meta.get("step_size", float("nan"))),
    )


def save_summary(path, summary):
    names = list(summary.keys())
    write_table(path, names, [summary[k] for k in names])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
