"""Large-depth behaviour: the asymptotic cosine ``c*``, its convergence rate and
the closed-form APJN growth laws.

Deep in the network ``q`` and ``p`` grow linearly in the block index and
``phi`` saturates, so the per-block increments depend only on the cosine
``c = p / q`` through ``p~(c)``: ``(2/pi) arcsin c`` for tanh-like maps and
``c`` for LayerNorm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import DomainError, NoInteriorRootError
from .kernels import c_alpha, kappa, kappa_prime

__all__ = [
    "CRITICAL",
    "SUBCRITICAL",
    "FixedPointReport",
    "AsymptoticLaw",
    "p_tilde_limit",
    "increments",
    "g_of_c",
    "g_prime",
    "solve_c_star",
    "asymptotic_law",
    "asymptotic_curve",
    "saturated_cosine_trajectory",
    "phase_map_row",
]

CRITICAL = "critical_powerlaw"
SUBCRITICAL = "subcritical_stretched"

BRACKET_DELTA = 1e-9
BISECTION_XTOL = 1e-12
BISECTION_MAXITER = 200
FD_STEP = 1e-6


@dataclass(frozen=True)
class FixedPointReport:
    c_star: float
    p_tilde_star: float
    g_prime: float
    mu: float

    @property
    def stable(self):
        return self.g_prime < 0.0


@dataclass(frozen=True)
class AsymptoticLaw:
    """Large-depth APJN law.

    ``zeta`` is set in the critical (LayerNorm) regime and ``lambda_inv`` in
    the subcritical (tanh-like) regime; the other field is ``nan``.
    """

    regime: str
    zeta: float
    lambda_inv: float
    q_slope: float
    p_slope: float
    fixed_point: FixedPointReport


def _check_c(c):
    if not (-1e-12 <= c <= 1.0 + 1e-12):
        raise DomainError(f"cosine {c!r} outside [0, 1]")
    return min(1.0, max(0.0, float(c)))


def p_tilde_limit(c, phi):
    """Saturated ``p~(c)``."""
    c = _check_c(c)
    return (2.0 / math.pi) * math.asin(c) if phi.is_tanh_like else c


def _p_tilde_prime(c, phi):
    if not phi.is_tanh_like:
        return 1.0
    return (2.0 / math.pi) / math.sqrt(max(1.0 - c * c, 0.0))


def increments(c, hyper):
    """Per-block growth ``(dq, dp)`` of ``(q, p)`` at cosine ``c``."""
    pt = p_tilde_limit(c, hyper.phi)
    half, s = 0.5 * hyper.sigma_21 ** 2, hyper.sigma_ov ** 2
    return half + s * pt, half * kappa(pt) + s * pt


def g_of_c(c, hyper):
    """``g(c) = dp(c) - c dq(c)``; its sign is the direction ``c`` drifts."""
    dq, dp = increments(c, hyper)
    return dp - _check_c(c) * dq


def g_prime(c, hyper):
    """Analytic ``g'(c)`` (infinite at ``c = 1`` for tanh-like maps)."""
    c = _check_c(c)
    pt = p_tilde_limit(c, hyper.phi)
    half, s = 0.5 * hyper.sigma_21 ** 2, hyper.sigma_ov ** 2
    if hyper.phi.is_tanh_like and c >= 1.0:
        return -math.inf
    return _p_tilde_prime(c, hyper.phi) * (half * kappa_prime(pt) + (1.0 - c) * s) - half - s * pt


def solve_c_star(hyper):
    """Stable root of ``g`` and the exponent of ``|c^b - c*| ~ b^{-mu}``.

    LayerNorm returns ``c* = 1``. For tanh-like maps ``g`` is bisected on
    ``[0, 1 - 1e-9]`` (``c = 1`` is an unstable root) and ``g'`` is taken by
    central differences with step ``1e-6``.

    Raises
    ------
    NoInteriorRootError
        If ``g`` does not change sign on the bracket (e.g. ``sigma_21 = 0``).
    """
    if not hyper.phi.is_tanh_like:
        gp = g_prime(1.0, hyper)
        dq, _ = increments(1.0, hyper)
        return FixedPointReport(1.0, 1.0, gp, -gp / dq)
    lo, hi = 0.0, 1.0 - BRACKET_DELTA
    g_lo, g_hi = g_of_c(lo, hyper), g_of_c(hi, hyper)
    if not (g_lo > 0.0 > g_hi):
        raise NoInteriorRootError(
            f"g has no sign change on [0, 1 - {BRACKET_DELTA:g}]: g(0) = {g_lo!r}, g(hi) = {g_hi!r}")
    c = optimize.bisect(g_of_c, lo, hi, args=(hyper,), xtol=BISECTION_XTOL, rtol=4 * np.finfo(float).eps,
                        maxiter=BISECTION_MAXITER)
    h = min(FD_STEP, c, 1.0 - c)
    gp = (g_of_c(c + h, hyper) - g_of_c(c - h, hyper)) / (2.0 * h)
    dq, _ = increments(c, hyper)
    return FixedPointReport(c, p_tilde_limit(c, hyper.phi), gp, -gp / dq)


def asymptotic_law(hyper, fixed_point=None):
    """Growth law of the APJN at large depth.

    LayerNorm: ``zeta = (sigma_21^2/2) / (sigma_21^2/2 + sigma_OV^2)``.
    Tanh-like: ``1/lambda = C_alpha^2 sigma_21^4 / (sigma_21^2/2 + sigma_OV^2 p~*)``.
    """
    fp = solve_c_star(hyper) if fixed_point is None else fixed_point
    half, s = 0.5 * hyper.sigma_21 ** 2, hyper.sigma_ov ** 2
    dq, dp = increments(fp.c_star, hyper)
    if hyper.phi.is_tanh_like:
        lam_inv = c_alpha(hyper.phi) ** 2 * hyper.sigma_21 ** 4 / (half + s * fp.p_tilde_star)
        return AsymptoticLaw(SUBCRITICAL, math.nan, lam_inv, dq, dp, fp)
    zeta = half / (half + s)
    return AsymptoticLaw(CRITICAL, zeta, math.nan, dq, dp, fp)


def _log_shape(law, b, B, direction):
    if law.regime == CRITICAL:
        return law.zeta * (math.log(b) if direction == "forward" else math.log(B / b))
    li = law.lambda_inv
    if direction == "forward":
        return -li / 8.0 * math.log(b) + math.sqrt(b * li)
    return -li / 8.0 * math.log(B / b) + (math.sqrt(B) - math.sqrt(b)) * math.sqrt(li)


def asymptotic_curve(law, b, B=None, direction="backward", anchor=None):
    """Asymptotic APJN at block ``b``.

    Parameters
    ----------
    law : AsymptoticLaw
    b : float or array_like
        Block index (``1 <= b``; ``b <= B`` for the backward curve).
    B : float, optional
        Total blocks; required for ``direction="backward"``.
    direction : {"forward", "backward"}
    anchor : tuple of (float, float), optional
        ``(b_ref, value)``: rescale so the curve passes through ``value`` at
        ``b_ref``. Without an anchor the bare shape is returned (so the
        backward curve is 1 at ``b = B``).
    """
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if direction == "backward" and B is None:
        raise DomainError("backward curves need the total block count B")
    bs = np.atleast_1d(np.asarray(b, dtype=float))
    if np.any(bs < 1) or (B is not None and np.any(bs > B)):
        raise DomainError("block index must satisfy 1 <= b <= B")
    out = np.array([_log_shape(law, x, B, direction) for x in bs])
    if anchor is not None:
        b_ref, value = anchor
        out += math.log(value) - _log_shape(law, float(b_ref), B, direction)
    out = np.exp(out)
    return float(out[0]) if np.ndim(b) == 0 else out


def saturated_cosine_trajectory(hyper, initial, blocks):
    """Block-level ``(q, p)`` under the saturated increments ``dq(c)``, ``dp(c)``.

    This is the large-depth model whose linearization defines ``mu``;
    it isolates the fixed-point dynamics from the slow approach of
    ``q~`` to its limit.

    Returns
    -------
    numpy.ndarray
        Cosines ``c^b`` for ``b = 0..blocks``.
    """
    q, p = float(initial.q), float(initial.p)
    out = np.empty(int(blocks) + 1)
    out[0] = p / q
    for b in range(1, int(blocks) + 1):
        dq, dp = increments(min(p / q, 1.0), hyper)
        q, p = q + dq, p + dp
        out[b] = p / q
    return out


def phase_map_row(hyper):
    """``(sigma_21, sigma_ov, alpha, regime, zeta, lambda_inv, c_star, mu)``."""
    law = asymptotic_law(hyper)
    alpha = hyper.phi.alpha if hyper.phi.is_tanh_like else math.nan
    return (hyper.sigma_21, hyper.sigma_ov, alpha, law.regime, law.zeta, law.lambda_inv,
            law.fixed_point.c_star, law.fixed_point.mu)
