"""CSV helpers: comma separated, header row, floats at 17 significant digits."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

__all__ = [
    "format_value",
    "write_csv",
    "read_csv",
    "write_tokens_csv",
    "read_tokens_csv",
    "TRAJECTORY_COLUMNS",
    "CURVE_COLUMNS",
    "PHASE_MAP_COLUMNS",
    "MEASUREMENT_COLUMNS",
]

TRAJECTORY_COLUMNS = ("layer", "parity", "q", "p", "q_tilde", "p_tilde")
CURVE_COLUMNS = ("block", "j_forward", "j_backward", "k_forward", "k_backward", "chi")
PHASE_MAP_COLUMNS = ("sigma_21", "sigma_ov", "alpha", "regime", "zeta", "lambda_inv", "c_star", "mu")
MEASUREMENT_COLUMNS = ("l_lo", "l_hi", "estimate", "std_error", "n_probes", "n_seeds")


def format_value(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def write_csv(path, header, rows):
    """Write ``rows`` under ``header``; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            writer.writerow([format_value(x) for x in row])
    return path


def read_csv(path):
    """Return ``(header, rows)`` with every field as a string."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_tokens_csv(path, tokens):
    """Token matrix as ``n`` rows of ``d`` columns (``x0 .. x{d-1}``)."""
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 2-D, got shape {tokens.shape}")
    header = [f"x{i}" for i in range(tokens.shape[1])]
    return write_csv(path, header, tokens.tolist())


def read_tokens_csv(path):
    _, rows = read_csv(path)
    out = np.array([[float(x) for x in row] for row in rows])
    if out.ndim != 2 or not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: expected a finite n x d matrix")
    return out
