"""Empirical APJN and activation statistics measured on the toy transformer.

APJNs are squared Frobenius norms of partial Jacobians divided by ``n d``,
estimated with Hutchinson's identity ``||J||_F^2 = E ||J^T v||^2`` for probes
with ``E[v v^T] = I``. A single batched backward sweep from the upper layer
yields the estimate for every lower layer at once.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .simulator import derive_seed, forward, init_weights, rng_for, vjp_sweep

__all__ = [
    "GAUSSIAN",
    "RADEMACHER",
    "ApjnEstimate",
    "CovStats",
    "GradientAmplification",
    "draw_probes",
    "weight_seed",
    "hutchinson_profile",
    "hutchinson_apjn",
    "backward_apjn_blocks",
    "exact_apjn",
    "measure_covariance",
    "covariance_profile",
    "gmfe",
    "depth_regions",
    "gradient_amplification",
]

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"


class ApjnEstimate(NamedTuple):
    """Estimate of ``J^{l_hi, l_lo}``.

    ``std_error`` treats weight seeds as clusters: with several seeds it is
    the standard error of the mean of the per-seed estimates, otherwise the
    standard error across probes.
    """

    value: float
    std_error: float
    n_seeds: int
    n_probes: int
    l_lo: int
    l_hi: int


class CovStats(NamedTuple):
    """Position-averaged self and cross dot products and their spread across positions."""

    q_mean: float
    p_mean: float
    q_std: float
    p_std: float


class GradientAmplification(NamedTuple):
    """Mean squared gradient norms at block outputs ``b = 0..B`` and their ratios."""

    sq_norms: np.ndarray
    out_sq_norm: float
    to_last: np.ndarray
    to_output: np.ndarray


def draw_probes(rng, shape, kind=GAUSSIAN):
    if kind == GAUSSIAN:
        return rng.standard_normal(shape)
    if kind == RADEMACHER:
        return rng.choice(np.array([-1.0, 1.0]), size=shape)
    raise DomainError(f"unknown probe distribution {kind!r}")


def weight_seed(config, index):
    """Seed of the ``index``-th weight draw of an ensemble rooted at ``config.seed``."""
    return derive_seed(config.seed, "weights", index)


def _summarize(per_probe, l_lo, l_hi):
    # per_probe: (n_seeds, n_probes)
    n_seeds, n_probes = per_probe.shape
    value = float(per_probe.mean())
    if n_seeds > 1:
        se = float(per_probe.mean(axis=1).std(ddof=1) / math.sqrt(n_seeds))
    elif n_probes > 1:
        se = float(per_probe[0].std(ddof=1) / math.sqrt(n_probes))
    else:
        se = math.nan
    return ApjnEstimate(value, se, n_seeds, n_probes, l_lo, l_hi)


def _seed_profile(config, tokens, index, l_hi, l_lo, n_probes, probe, fixed_weights):
    cfg = config if fixed_weights else config.with_seed(weight_seed(config, index))
    weights = init_weights(cfg)
    trace = forward(weights, tokens, cfg)
    rng = rng_for(config.seed, "probes", index, l_hi)
    v = draw_probes(rng, (n_probes, cfg.n, cfg.d), probe)
    nd = cfg.n * cfg.d
    out = {}
    for layer, g in vjp_sweep(trace, weights, v, l_hi, l_lo):
        out[layer] = np.einsum("pij,pij->p", g, g) / nd
    return out


def hutchinson_profile(config, tokens, l_hi, l_lo=0, n_probes=10, n_seeds=8, probe=GAUSSIAN,
                       fixed_weights=False, workers=1):
    """Hutchinson estimates of ``J^{l_hi, l}`` for every ``l`` in ``[l_lo, l_hi]``.

    Parameters
    ----------
    config : TransformerConfig
        Architecture; ``config.seed`` roots the weight and probe streams.
    tokens : array_like, shape (n, d)
    l_hi, l_lo : int
        Layer range; ``l_hi`` may be ``L + 1`` (final normalization output).
    n_probes, n_seeds : int
        Probes per weight draw and number of weight draws.
    probe : {"gaussian", "rademacher"}
    fixed_weights : bool
        Use ``config.seed`` itself for the weights instead of an ensemble
        (requires ``n_seeds == 1``).
    workers : int
        Threads over seeds. Results are reduced in seed order, so they do not
        depend on the thread count.

    Returns
    -------
    dict
        Layer index -> ApjnEstimate. The diagonal entry ``l_hi`` is exactly 1.
    """
    if n_probes < 1 or n_seeds < 1:
        raise DomainError("n_probes and n_seeds must be >= 1")
    if fixed_weights and n_seeds != 1:
        raise DomainError("fixed_weights needs n_seeds == 1")
    tokens = np.asarray(tokens, dtype=float)

    def job(i):
        return _seed_profile(config, tokens, i, l_hi, l_lo, n_probes, probe, fixed_weights)

    if workers > 1 and n_seeds > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(job, range(n_seeds)))
    else:
        per_seed = [job(i) for i in range(n_seeds)]
    result = {}
    for layer in per_seed[0]:
        if layer == l_hi:
            result[layer] = ApjnEstimate(1.0, 0.0, n_seeds, n_probes, layer, l_hi)
            continue
        result[layer] = _summarize(np.array([s[layer] for s in per_seed]), layer, l_hi)
    return result


def hutchinson_apjn(config, tokens, l_lo, l_hi, n_probes=10, n_seeds=8, probe=GAUSSIAN, **kwargs):
    """Hutchinson estimate of ``J^{l_hi, l_lo}``; see ``hutchinson_profile``."""
    return hutchinson_profile(config, tokens, l_hi, l_lo, n_probes, n_seeds, probe, **kwargs)[l_lo]


def backward_apjn_blocks(config, tokens, n_probes=10, n_seeds=8, through_final=False, **kwargs):
    """Backward APJN from the last block (or final normalization) to every block output.

    Returns
    -------
    list of ApjnEstimate
        Entry ``b`` estimates ``J^{B,b}`` (``J^{out,b}`` with ``through_final``), ``b = 0..B``.
    """
    l_hi = config.n_layers + 1 if through_final else config.n_layers
    if through_final and not config.final_norm:
        raise DomainError("through_final needs config.final_norm")
    prof = hutchinson_profile(config, tokens, l_hi, 0, n_probes, n_seeds, **kwargs)
    return [prof[2 * b] for b in range(config.blocks + 1)]


def exact_apjn(config, tokens, l_lo, l_hi, weights=None):
    """``||J^{l_hi, l_lo}||_F^2 / (n d)`` assembled from ``n d`` unit-vector VJPs (small models only)."""
    weights = init_weights(config) if weights is None else weights
    trace = forward(weights, tokens, config)
    nd = config.n * config.d
    basis = np.eye(nd).reshape(nd, config.n, config.d)
    g = None
    for _, g in vjp_sweep(trace, weights, basis, l_hi, l_lo):
        pass
    return float(np.sum(g * g) / nd)


def measure_covariance(trace, block):
    """Self and cross dot products (over ``d``) at the output of ``block``."""
    h = trace.block_output(block)
    n, d = h.shape
    gram = h @ h.T / d
    diag = np.diag(gram)
    off = gram[~np.eye(n, dtype=bool)]
    return CovStats(float(diag.mean()), float(off.mean()), float(diag.std()), float(off.std()))


def covariance_profile(trace):
    """``measure_covariance`` at every block output ``b = 0..B``."""
    return [measure_covariance(trace, b) for b in range(trace.config.blocks + 1)]


def gmfe(theory, measured):
    """Geometric mean fold error ``exp(mean |log(theory / measured)|)``."""
    t = np.asarray(theory, dtype=float)
    m = np.asarray(measured, dtype=float)
    if t.shape != m.shape or t.size == 0:
        raise DomainError("curves must be non-empty and of equal length")
    if np.any(~(t > 0)) or np.any(~(m > 0)):
        raise DomainError("GMFE needs strictly positive curves")
    return float(np.exp(np.mean(np.abs(np.log(t) - np.log(m)))))


def depth_regions(blocks):
    """Blocks in thirds of depth with both endpoints excluded.

    early ``[1, B/3]``, middle ``(B/3, 2B/3]``, deep ``(2B/3, B - 1]``.
    """
    B = int(blocks)
    idx = np.arange(1, B)
    return {
        "early": [int(b) for b in idx if b <= B / 3],
        "middle": [int(b) for b in idx if B / 3 < b <= 2 * B / 3],
        "deep": [int(b) for b in idx if b > 2 * B / 3],
    }


def gradient_amplification(config, tokens, readout_seed, n_seeds=1):
    """Squared gradient norms at block outputs under a random linear readout.

    The loss is ``(r . mean_s h_out_s)^2 / 2`` with a fixed Gaussian readout
    ``r ~ N(0, I/d)`` and ``h_out`` the network output (after the final
    normalization when enabled). Norms are averaged over the token batch and
    ``n_seeds`` weight draws.

    Parameters
    ----------
    tokens : array_like, shape (n, d) or (batch, n, d)
    """
    batch = np.asarray(tokens, dtype=float)
    if batch.ndim == 2:
        batch = batch[None]
    r = rng_for(readout_seed, "readout").standard_normal(config.d) / math.sqrt(config.d)
    L = config.n_layers
    sq = np.zeros(config.blocks + 1)
    sq_out = 0.0
    count = 0
    for i in range(n_seeds):
        cfg = config.with_seed(weight_seed(config, i))
        weights = init_weights(cfg)
        for x in batch:
            trace = forward(weights, x, cfg)
            m = trace.output.mean(axis=0)
            g_out = np.broadcast_to((r @ m) * r / cfg.n, (cfg.n, cfg.d))
            sq_out += float(np.sum(g_out * g_out))
            for layer, g in vjp_sweep(trace, weights, g_out, trace.output_layer, 0):
                if layer <= L and layer % 2 == 0:
                    sq[layer // 2] += float(np.sum(g * g))
            count += 1
    sq /= count
    sq_out /= count
    return GradientAmplification(sq, sq_out, sq / sq[-1], sq / sq_out)
