"""Averaged partial Jacobian norms (APJN) predicted from a covariance trajectory.

Two levels of approximation are offered. The simplified recurrence keeps only
the MLP factor ``chi = 1 + sigma_21^2 q^ / 2``; the extended recurrences keep
the direct attention term and couple ``J`` to the cross-positional Jacobian
correlation ``K``. Values are stored as ``log J`` (and ``K / J``) so that runs
over ``1e5`` blocks neither overflow nor lose the small per-layer increments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .covariance import ATTN, MLP, CovTrajectory, ModelHyper, parity
from .errors import DomainError, UnsupportedRegimeError
from .kernels import _hat, _hat_q, hat_kappa, hat_q

__all__ = [
    "FORWARD",
    "BACKWARD",
    "SIMPLIFIED",
    "EXTENDED",
    "JKState",
    "ApjnCurve",
    "chi_factor",
    "chi_factors",
    "forward_simplified",
    "backward_simplified",
    "forward_extended",
    "backward_extended",
    "final_norm_factor",
    "curve_rows",
]

FORWARD = "forward"
BACKWARD = "backward"
SIMPLIFIED = "simplified"
EXTENDED = "extended"


class JKState(NamedTuple):
    j: float
    k: float


@dataclass(frozen=True, eq=False)
class ApjnCurve:
    """APJN values indexed by layer ``0..L``.

    For a forward curve ``log_j[l] = log J^{l,0}``; for a backward curve
    ``log_j[l] = log J^{L,l}``. ``k_ratio[l]`` is ``K / J`` at the same index
    (all zeros in simplified mode).
    """

    direction: str
    mode: str
    log_j: np.ndarray
    k_ratio: np.ndarray

    def __post_init__(self):
        for name in ("log_j", "k_ratio"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def reference_layer(self):
        return 0 if self.direction == FORWARD else len(self.log_j) - 1

    @property
    def values(self):
        return np.exp(self.log_j)

    @property
    def k(self):
        return self.k_ratio * self.values

    @property
    def block_log_j(self):
        """``log`` of the block-level curve at ``b = 0..B`` (layer ``2b``)."""
        return self.log_j[::2]

    @property
    def block_values(self):
        return np.exp(self.block_log_j)

    @property
    def block_k_ratio(self):
        return self.k_ratio[::2]

    def states(self):
        j = self.values
        return [JKState(float(a), float(b)) for a, b in zip(j, self.k_ratio * j)]


def _compensated_cumsum(terms):
    # Neumaier summation, prefixed with the empty sum
    out = np.empty(len(terms) + 1)
    out[0] = 0.0
    s = c = 0.0
    for i, x in enumerate(terms):
        x = float(x)
        t = s + x
        if abs(s) >= abs(x):
            c += (s - t) + x
        else:
            c += (x - t) + s
        s = t
        out[i + 1] = s + c
    return out


def chi_factor(entry, hyper):
    """Simplified APJN multiplier of one layer.

    Parameters
    ----------
    entry : LayerRecord
        Trajectory entry carrying the state entering the layer.
    hyper : ModelHyper

    Returns
    -------
    float
        1 for attention, ``1 + sigma_21^2 q^(q^l) / 2`` for an MLP layer.
    """
    if entry.parity == ATTN:
        return 1.0
    if entry.parity != MLP:
        raise DomainError(f"layer {entry.layer} is not a residual layer")
    return 1.0 + 0.5 * hyper.sigma_21 ** 2 * hat_q(entry.cov.q, hyper.phi)


def _log_chi(traj, hyper):
    kind, alpha = hyper.phi.kind, hyper.phi.alpha
    half = 0.5 * hyper.sigma_21 ** 2
    out = np.zeros(traj.n_layers)
    for layer in range(1, traj.n_layers, 2):
        out[layer] = math.log1p(half * _hat_q(kind, alpha, float(traj.q[layer])))
    return out


def chi_factors(traj, hyper=None):
    """``chi^l`` for ``l = 0..L-1``."""
    hyper = traj.hyper if hyper is None else hyper
    return np.exp(_log_chi(traj, hyper))


def forward_simplified(traj, hyper=None):
    """``J^{l,0} = prod_{k<l} chi^k``, accumulated in log-space."""
    hyper = traj.hyper if hyper is None else hyper
    log_j = _compensated_cumsum(_log_chi(traj, hyper))
    return ApjnCurve(FORWARD, SIMPLIFIED, log_j, np.zeros_like(log_j))


def backward_simplified(traj, hyper=None):
    """``J^{L,l} = J^{L,0} / J^{l,0}``."""
    fwd = forward_simplified(traj, hyper)
    log_j = fwd.log_j[-1] - fwd.log_j
    return ApjnCurve(BACKWARD, SIMPLIFIED, log_j, np.zeros_like(log_j))


def _layer_hats(traj, hyper):
    kind, alpha = hyper.phi.kind, hyper.phi.alpha
    L = traj.n_layers
    q_h = np.empty(L)
    p_h = np.empty(L)
    k_h = np.zeros(L)
    for layer in range(L):
        q_h[layer], p_h[layer] = _hat(kind, alpha, float(traj.q[layer]), float(traj.p[layer]))
        p_h[layer] = min(p_h[layer], q_h[layer])
        if layer % 2 == 1:
            k_h[layer] = hat_kappa(min(1.0, float(traj.p_tilde[layer] / traj.q_tilde[layer])))
    return q_h, p_h, k_h


def _require_finite_n(hyper):
    if hyper.large_n:
        raise UnsupportedRegimeError("extended recurrences need a finite context size n")


def forward_extended(traj, hyper=None):
    """Joint forward ``(J, K)`` recursion from ``J^{0,0} = 1``, ``K^{0,0} = 0``.

    Attention layers: ``J' = (1 + s q^/n) J + s p^ K`` and
    ``K' = (1 + s p^) K + (s/n) q^ J`` with ``s = sigma_OV^2``. MLP layers:
    ``J' = (1 + sigma_21^2 q^ / 2) J`` and ``K' = (1 + sigma_21^2 k^ p^) K``
    with ``k^ = hat_kappa(p~/q~)``.
    """
    hyper = traj.hyper if hyper is None else hyper
    _require_finite_n(hyper)
    q_h, p_h, k_h = _layer_hats(traj, hyper)
    s, n, s21 = hyper.sigma_ov ** 2, hyper.context_n, hyper.sigma_21 ** 2
    L = traj.n_layers
    log_steps = np.empty(L)
    ratio = np.zeros(L + 1)
    r = 0.0
    for layer in range(L):
        if layer % 2 == 0:
            g = 1.0 + s * q_h[layer] / n + s * p_h[layer] * r
            r = ((1.0 + s * p_h[layer]) * r + (s / n) * q_h[layer]) / g
        else:
            g = 1.0 + 0.5 * s21 * q_h[layer]
            r = r * (1.0 + s21 * k_h[layer] * p_h[layer]) / g
        log_steps[layer] = math.log(g)
        ratio[layer + 1] = r
    return ApjnCurve(FORWARD, EXTENDED, _compensated_cumsum(log_steps), ratio)


def backward_extended(traj, hyper=None, swap_coupling=False):
    """Joint backward ``(J, K)`` recursion from ``J^{L,L} = 1``, ``K^{L,L} = 0``.

    Attention layers: ``J = (1 + s q^/n) J' + s q^ K'`` and
    ``K = (1 + s p^) K' + (s/n) p^ J'`` where primes denote index ``l+1``.
    MLP layers as in ``forward_extended``. ``swap_coupling=True`` exchanges
    ``q^`` and ``p^`` in the two cross terms, mirroring the forward form.
    """
    hyper = traj.hyper if hyper is None else hyper
    _require_finite_n(hyper)
    q_h, p_h, k_h = _layer_hats(traj, hyper)
    s, n, s21 = hyper.sigma_ov ** 2, hyper.context_n, hyper.sigma_21 ** 2
    L = traj.n_layers
    log_steps = np.empty(L)
    ratio = np.zeros(L + 1)
    r = 0.0
    for layer in range(L - 1, -1, -1):
        if layer % 2 == 0:
            to_j, to_k = (p_h[layer], q_h[layer]) if swap_coupling else (q_h[layer], p_h[layer])
            g = 1.0 + s * q_h[layer] / n + s * to_j * r
            r = ((1.0 + s * p_h[layer]) * r + (s / n) * to_k) / g
        else:
            g = 1.0 + 0.5 * s21 * q_h[layer]
            r = r * (1.0 + s21 * k_h[layer] * p_h[layer]) / g
        log_steps[layer] = math.log(g)
        ratio[layer] = r
    # log J^{L,l} = sum_{k >= l} log g_k
    log_j = _compensated_cumsum(log_steps[::-1])[::-1]
    return ApjnCurve(BACKWARD, EXTENDED, log_j, ratio)


def final_norm_factor(Q_B, phi):
    """``Q^B``: extra APJN factor from a final normalization at block variance ``Q_B``."""
    return hat_q(Q_B, phi)


def curve_rows(traj, hyper=None, extended=False, swap_coupling=False):
    """Block rows ``(block, j_forward, j_backward, k_forward, k_backward, chi)``.

    Rows run over ``b = 1..B``; ``j_forward`` is ``J^{b,0}``, ``j_backward`` is
    ``J^{B,b}`` and ``chi`` is the multiplier of the MLP layer inside block ``b``.
    """
    hyper = traj.hyper if hyper is None else hyper
    if extended:
        fwd = forward_extended(traj, hyper)
        bwd = backward_extended(traj, hyper, swap_coupling=swap_coupling)
    else:
        fwd = forward_simplified(traj, hyper)
        bwd = backward_simplified(traj, hyper)
    chi = chi_factors(traj, hyper)
    jf, jb = fwd.block_values, bwd.block_values
    kf, kb = fwd.block_k_ratio * jf, bwd.block_k_ratio * jb
    return [(b, jf[b], jb[b], kf[b], kb[b], chi[2 * b - 1]) for b in range(1, traj.n_blocks + 1)]
