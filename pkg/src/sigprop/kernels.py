"""Bivariate-Gaussian expectations consumed by the signal-propagation recurrences.

Everything here is a pure function of its arguments. The closed forms cover
ReLU (``kappa``, ``hat_kappa``) and ``erf``; ``tanh`` goes through numerical
quadrature. Gauss-Hermite is tried first; integrands that become step-like
(large ``alpha * sqrt(q)``) fall back to a composite Gauss-Legendre rule whose
panels are graded around the transition at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .errors import DomainError, QuadratureError

__all__ = [
    "CovPair",
    "Nonlinearity",
    "QuadratureRule",
    "gauss_hermite",
    "gaussian_expectation",
    "gaussian_pair_expectation",
    "kappa",
    "kappa_prime",
    "hat_kappa",
    "propagate_phi",
    "propagate_phi_prime",
    "hat_q",
    "c_alpha",
]

DOMAIN_TOL = 1e-12
GH_ORDER = 64
GH_MAX_ORDER = 128
CONVERGENCE_RTOL = 1e-9
_ATOL = 1e-14

LAYERNORM = "layernorm"
ERF = "erf"
TANH = "tanh"
_KINDS = (LAYERNORM, ERF, TANH)
_ALIASES = {"ln": LAYERNORM, "preln": LAYERNORM, "pre-ln": LAYERNORM, "rms": LAYERNORM,
            "derf": ERF, "dyt": TANH}


@dataclass(frozen=True)
class CovPair:
    """Normalized self dot product ``q`` and cross-position dot product ``p``.

    ``|p|`` may exceed ``q`` by a relative ``1e-12`` (floating-point drift in
    long recurrences); such values are clamped onto the boundary.
    """

    q: float
    p: float

    def __post_init__(self):
        q, p = float(self.q), float(self.p)
        if not (q > 0.0) or not math.isfinite(q):
            raise DomainError(f"q must be positive and finite, got {q!r}")
        if not math.isfinite(p):
            raise DomainError(f"p must be finite, got {p!r}")
        if abs(p) > q:
            if abs(p) > q * (1.0 + DOMAIN_TOL):
                raise DomainError(f"|p| = {abs(p)!r} exceeds q = {q!r}")
            p = math.copysign(q, p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def cosine(self):
        return self.p / self.q


@dataclass(frozen=True)
class Nonlinearity:
    """Map applied at the input of every residual branch.

    ``kind`` is ``"layernorm"`` (RMS form, no mean subtraction), ``"erf"``
    (Derf) or ``"tanh"`` (DyT). ``alpha`` is ignored for LayerNorm.
    """

    kind: str = LAYERNORM
    alpha: float = 1.0

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower(), str(self.kind).lower())
        if kind not in _KINDS:
            raise DomainError(f"unknown nonlinearity {self.kind!r}; expected one of {_KINDS}")
        alpha = float(self.alpha)
        if kind != LAYERNORM and not alpha > 0.0:
            raise DomainError(f"alpha must be positive for {kind}, got {alpha!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def layernorm(cls):
        return cls(LAYERNORM)

    @classmethod
    def erf(cls, alpha=1.0):
        return cls(ERF, alpha)

    @classmethod
    def tanh(cls, alpha=1.0):
        return cls(TANH, alpha)

    @classmethod
    def parse(cls, text):
        """Parse ``"layernorm"``, ``"erf:0.4"``, ``"tanh:1"`` (or ``derf``/``dyt``)."""
        kind, _, alpha = str(text).strip().partition(":")
        return cls(kind, float(alpha) if alpha else 1.0)

    @property
    def is_tanh_like(self):
        return self.kind != LAYERNORM

    def __str__(self):
        return self.kind if self.kind == LAYERNORM else f"{self.kind}:{self.alpha:g}"

    def __call__(self, x):
        """Elementwise ``phi_alpha``; not defined for LayerNorm."""
        x = self.alpha * np.asarray(x, dtype=float)
        if self.kind == ERF:
            return special.erf(x)
        if self.kind == TANH:
            return np.tanh(x)
        raise DomainError("LayerNorm is not an elementwise map")

    def derivative(self, x):
        x = self.alpha * np.asarray(x, dtype=float)
        if self.kind == ERF:
            return self.alpha * (2.0 / math.sqrt(math.pi)) * np.exp(-x * x)
        if self.kind == TANH:
            return self.alpha * _sech2(x)
        raise DomainError("LayerNorm is not an elementwise map")


def _sech2(x):
    # overflow-free 1 / cosh(x)**2
    t = np.exp(-2.0 * np.abs(x))
    return 4.0 * t / (1.0 + t) ** 2


# ---------------------------------------------------------------------------
# Quadrature rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for the weight ``exp(-x**2)`` (weights sum to sqrt(pi))."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self):
        return len(self.nodes)


@lru_cache(maxsize=None)
def gauss_hermite(order=GH_ORDER):
    if order < 1:
        raise DomainError(f"quadrature order must be >= 1, got {order}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights)


@lru_cache(maxsize=None)
def _gauss_legendre(order):
    return np.polynomial.legendre.leggauss(order)


def _close(a, b):
    return abs(a - b) <= CONVERGENCE_RTOL * max(abs(a), abs(b)) + _ATOL


def _gh_1d(f, var, order):
    rule = gauss_hermite(order)
    x = math.sqrt(2.0 * var) * rule.nodes
    return float(rule.weights @ f(x)) / math.sqrt(math.pi)


def _gh_2d(f, g, q, p, order):
    rule = gauss_hermite(order)
    z = math.sqrt(2.0) * rule.nodes
    l11 = math.sqrt(q)
    l21 = p / l11
    l22 = math.sqrt(max(q - p * p / q, 0.0))
    fx = f(l11 * z)
    gx = g(l21 * z[:, None] + l22 * z[None, :])
    return float(rule.weights @ (fx * (gx @ rule.weights))) / math.pi


def _panel_breaks(lo, hi, width, feature, scale):
    """Uniform panels of at most ``width`` plus points graded geometrically around ``feature``."""
    m = max(int(math.ceil((hi - lo) / width)), 1)
    pts = [np.linspace(lo, hi, m + 1)]
    if scale > 0.0:
        steps = scale * 2.0 ** np.arange(-4, 60)
        steps = steps[steps < (hi - lo)]
        graded = np.concatenate([feature - steps, [feature], feature + steps])
        pts.append(graded[(graded > lo) & (graded < hi)])
    return np.unique(np.concatenate(pts))


def _composite_nodes(breaks, order):
    t, w = _gauss_legendre(order)
    half = 0.5 * np.diff(breaks)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    return (mid[:, None] + half[:, None] * t).ravel(), (half[:, None] * w).ravel()


def _gauss_pdf(x, mean, sd):
    u = (x - mean) / sd
    return np.exp(-0.5 * u * u) / (sd * math.sqrt(2.0 * math.pi))


def _graded_1d(f, var, scale, order):
    sd = math.sqrt(var)
    x, w = _composite_nodes(_panel_breaks(-10.0 * sd, 10.0 * sd, 0.5 * sd, 0.0, scale), order)
    return float(np.sum(w * _gauss_pdf(x, 0.0, sd) * f(x)))


def _graded_2d(f, g, q, p, scale, order):
    sd = math.sqrt(q)
    rho = p / q
    sd_c = sd * math.sqrt(max(1.0 - rho * rho, 0.0))
    if sd_c < 1e-12 * sd:
        return _graded_1d(lambda x: f(x) * g(x), q, scale, order)
    x, w = _composite_nodes(_panel_breaks(-10.0 * sd, 10.0 * sd, 0.5 * sd, 0.0, scale), order)
    # inner integral over h2 | h1 in standardized units t = (h2 - rho*h1) / sd_c;
    # graded points sit at g's transition t0 and are clipped to the window, so
    # every row has the same number of (possibly zero-width) panels
    t0 = -rho * x / sd_c
    uniform = np.linspace(-10.0, 10.0, 41)
    local = scale / sd_c if scale > 0.0 else 0.0
    if local > 0.0:
        steps = local * 2.0 ** np.arange(-4, 60)
        steps = steps[: max(int(np.searchsorted(steps, 20.0)) + 1, 1)]
        graded = t0[:, None] + np.concatenate([-steps, [0.0], steps])[None, :]
        breaks = np.concatenate([np.broadcast_to(uniform, (len(x), 41)), np.clip(graded, -10.0, 10.0)], axis=1)
    else:
        breaks = np.broadcast_to(uniform, (len(x), 41))
    breaks = np.sort(breaks, axis=1)
    gl_t, gl_w = _gauss_legendre(order)
    half = 0.5 * np.diff(breaks, axis=1)
    mid = 0.5 * (breaks[:, 1:] + breaks[:, :-1])
    t = (mid[:, :, None] + half[:, :, None] * gl_t).reshape(len(x), -1)
    v = (half[:, :, None] * gl_w).reshape(len(x), -1)
    dens = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    inner = np.sum(v * dens * g(rho * x[:, None] + sd_c * t), axis=1)
    return float(np.sum(w * _gauss_pdf(x, 0.0, sd) * f(x) * inner))


def _use_hermite(var, scale):
    # Gauss-Hermite cannot see features much narrower than its node spacing,
    # and then agrees with itself under refinement while being wrong
    return scale <= 0.0 or scale >= 0.5 * math.sqrt(var)


def gaussian_expectation(f, var, scale=0.0):
    """``E[f(h)]`` for ``h ~ N(0, var)``.

    ``scale`` is the width of the sharpest feature of ``f`` around zero; it
    only matters if Gauss-Hermite fails its 64 -> 128 node refinement check.
    """
    if _use_hermite(var, scale):
        a = _gh_1d(f, var, GH_ORDER)
        b = _gh_1d(f, var, GH_MAX_ORDER)
        if _close(a, b):
            return b
    a = _graded_1d(f, var, scale, 10)
    b = _graded_1d(f, var, scale, 20)
    if _close(a, b):
        return b
    raise QuadratureError(f"1-D Gaussian expectation did not converge (var={var!r}: {a!r} vs {b!r})")


def gaussian_pair_expectation(f, g, q, p, scale=0.0):
    """``E[f(h1) g(h2)]`` for ``(h1, h2) ~ N(0, [[q, p], [p, q]])``."""
    if _use_hermite(q, scale):
        a = _gh_2d(f, g, q, p, GH_ORDER)
        b = _gh_2d(f, g, q, p, GH_MAX_ORDER)
        if _close(a, b):
            return b
    a = _graded_2d(f, g, q, p, scale, 10)
    b = _graded_2d(f, g, q, p, scale, 20)
    if _close(a, b):
        return b
    raise QuadratureError(
        f"2-D Gaussian expectation did not converge (q={q!r}, p={p!r}: {a!r} vs {b!r})")


# ---------------------------------------------------------------------------
# ReLU kernels
# ---------------------------------------------------------------------------


def _check_correlation(rho):
    if isinstance(rho, (float, int)):
        if math.isnan(rho) or abs(rho) > 1.0 + DOMAIN_TOL:
            raise DomainError(f"correlation {rho!r} outside [-1, 1]")
        return min(1.0, max(-1.0, float(rho)))
    rho = np.asarray(rho, dtype=float)
    if np.any(np.isnan(rho)) or np.any(np.abs(rho) > 1.0 + DOMAIN_TOL):
        raise DomainError("correlation outside [-1, 1]")
    return np.clip(rho, -1.0, 1.0)


def kappa(rho):
    """Normalized ReLU covariance map: ``E[relu(u) relu(v)] / (q/2)`` at correlation ``rho``."""
    rho = _check_correlation(rho)
    if isinstance(rho, float):
        return (math.sqrt(1.0 - rho * rho) + rho * (math.pi - math.acos(rho))) / math.pi
    return (np.sqrt(1.0 - rho * rho) + rho * (np.pi - np.arccos(rho))) / np.pi


def kappa_prime(rho):
    rho = _check_correlation(rho)
    if isinstance(rho, float):
        return (math.pi - math.acos(rho)) / math.pi
    return (np.pi - np.arccos(rho)) / np.pi


def hat_kappa(rho):
    """``E[relu'(u) relu'(v)]`` at correlation ``rho``."""
    rho = _check_correlation(rho)
    if isinstance(rho, float):
        return 0.25 + math.asin(rho) / (2.0 * math.pi)
    return 0.25 + np.arcsin(rho) / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# Covariance maps through phi and phi'
# ---------------------------------------------------------------------------


def _clamped_asin(x):
    return math.asin(min(1.0, max(-1.0, x)))


@lru_cache(maxsize=1 << 16)
def _tilde(kind, alpha, q, p):
    if kind == LAYERNORM:
        return 1.0, p / q
    if kind == ERF:
        a2 = 2.0 * alpha * alpha
        den = 1.0 + a2 * q
        return (2.0 / math.pi) * _clamped_asin(a2 * q / den), (2.0 / math.pi) * _clamped_asin(a2 * p / den)
    phi = Nonlinearity(kind, alpha)
    scale = 1.0 / alpha
    q_t = gaussian_expectation(lambda x: phi(x) ** 2, q, scale)
    p_t = gaussian_pair_expectation(phi, phi, q, p, scale)
    # an odd phi has odd Hermite modes only, so p~ carries the sign of p
    p_t = math.copysign(min(abs(p_t), q_t), p) if p != 0.0 else 0.0
    return q_t, p_t


@lru_cache(maxsize=1 << 16)
def _hat_q(kind, alpha, q):
    if kind == LAYERNORM:
        return 1.0 / q
    if kind == ERF:
        a2 = alpha * alpha
        return 4.0 * a2 / (math.pi * math.sqrt(1.0 + 4.0 * a2 * q))
    phi = Nonlinearity(kind, alpha)
    return gaussian_expectation(lambda x: phi.derivative(x) ** 2, q, 1.0 / alpha)


@lru_cache(maxsize=1 << 16)
def _hat(kind, alpha, q, p):
    q_h = _hat_q(kind, alpha, q)
    if kind == LAYERNORM:
        return q_h, q_h
    if kind == ERF:
        a2 = alpha * alpha
        return q_h, 4.0 * a2 / (math.pi * math.sqrt((1.0 + 2.0 * a2 * q) ** 2 - 4.0 * a2 * a2 * p * p))
    phi = Nonlinearity(kind, alpha)
    p_h = gaussian_pair_expectation(phi.derivative, phi.derivative, q, p, 1.0 / alpha)
    return q_h, p_h


def propagate_phi(cov, phi):
    """Covariance ``(q~, p~)`` of the branch inputs after ``phi`` (or RMS LayerNorm)."""
    q_t, p_t = _tilde(phi.kind, phi.alpha, cov.q, cov.p)
    return CovPair(q_t, p_t)


def propagate_phi_prime(cov, phi):
    """Covariance ``(q^, p^)`` propagated through ``phi'`` (LayerNorm: ``1/q`` for both)."""
    q_h, p_h = _hat(phi.kind, phi.alpha, cov.q, cov.p)
    return CovPair(q_h, min(p_h, q_h))


def hat_q(q, phi):
    """``E[phi'(h)^2]`` for ``h ~ N(0, q)``; ``1/q`` for LayerNorm.

    This is the diagonal of ``propagate_phi_prime`` without the 2-D integral,
    and also the final-normalization factor at block variance ``q``.
    """
    q = float(q)
    if not q > 0.0:
        raise DomainError(f"q must be positive, got {q!r}")
    return _hat_q(phi.kind, phi.alpha, q)


def propagate_phi_by_quadrature(cov, phi):
    """Quadrature route for ``propagate_phi``, independent of any closed form."""
    if phi.kind == LAYERNORM:
        raise DomainError("LayerNorm has no elementwise quadrature route")
    scale = 1.0 / phi.alpha
    q_t = gaussian_expectation(lambda x: phi(x) ** 2, cov.q, scale)
    p_t = gaussian_pair_expectation(phi, phi, cov.q, cov.p, scale)
    return q_t, p_t


def propagate_phi_prime_by_quadrature(cov, phi):
    if phi.kind == LAYERNORM:
        raise DomainError("LayerNorm has no elementwise quadrature route")
    scale = 1.0 / phi.alpha
    q_h = gaussian_expectation(lambda x: phi.derivative(x) ** 2, cov.q, scale)
    p_h = gaussian_pair_expectation(phi.derivative, phi.derivative, cov.q, cov.p, scale)
    return q_h, p_h


def c_alpha(phi):
    """``(2 pi)^{-1/2} * integral of phi'(h)^2 dh``: the large-``q`` prefactor of ``q^ ~ C / sqrt(q)``."""
    if phi.kind == LAYERNORM:
        raise DomainError("C_alpha is only defined for tanh-like nonlinearities")
    if phi.kind == ERF:
        return 2.0 * phi.alpha / math.pi
    val, err = integrate.quad(lambda h: float(phi.derivative(h)) ** 2, -np.inf, np.inf,
                              epsabs=1e-14, epsrel=1e-12, limit=200)
    return val / math.sqrt(2.0 * math.pi)
