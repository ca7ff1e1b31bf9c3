"""Layerwise covariance recurrences for a pre-normalized residual transformer.

Layer ``l`` is attention when ``l`` is even and a ReLU MLP when ``l`` is odd,
so block ``b`` (``1 <= b <= B``) maps ``h^{2b-2}`` to ``h^{2b}``. The state
is the permutation-symmetric pair ``(q, p)``; the branch sees ``(q~, p~)``
after RMS LayerNorm or the elementwise ``phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, UnsupportedRegimeError
from .kernels import CovPair, Nonlinearity, _tilde, kappa

__all__ = [
    "ATTN",
    "MLP",
    "FINAL",
    "ModelHyper",
    "LayerRecord",
    "CovTrajectory",
    "step_attention",
    "step_mlp",
    "run_trajectory",
    "parity",
]

ATTN = "attn"
MLP = "mlp"
FINAL = "final"


def parity(layer):
    return ATTN if layer % 2 == 0 else MLP


@dataclass(frozen=True)
class ModelHyper:
    """Theory hyperparameters.

    Parameters
    ----------
    sigma_ov, sigma_21 : float
        Products ``sigma_O * sigma_V`` and ``sigma_2 * sigma_1``.
    context_n : float
        Token count ``n``; ``math.inf`` (the default) selects the large-``n`` limit.
    phi : Nonlinearity or str
        Branch-input map; strings go through ``Nonlinearity.parse``.
    """

    sigma_ov: float
    sigma_21: float
    context_n: float = math.inf
    phi: Nonlinearity = Nonlinearity()

    def __post_init__(self):
        sov, s21 = float(self.sigma_ov), float(self.sigma_21)
        if not (sov >= 0.0 and s21 >= 0.0) or not (math.isfinite(sov) and math.isfinite(s21)):
            raise DomainError(f"sigma_ov and sigma_21 must be finite and non-negative, got {sov!r}, {s21!r}")
        n = float(self.context_n)
        if math.isfinite(n):
            if n < 2 or n != int(n):
                raise DomainError(f"context_n must be an integer >= 2 or inf, got {self.context_n!r}")
        elif n != math.inf:
            raise DomainError(f"context_n must be an integer >= 2 or inf, got {self.context_n!r}")
        phi = self.phi if isinstance(self.phi, Nonlinearity) else Nonlinearity.parse(self.phi)
        object.__setattr__(self, "sigma_ov", sov)
        object.__setattr__(self, "sigma_21", s21)
        object.__setattr__(self, "context_n", n)
        object.__setattr__(self, "phi", phi)

    @property
    def large_n(self):
        return math.isinf(self.context_n)

    def with_n(self, n):
        return ModelHyper(self.sigma_ov, self.sigma_21, n, self.phi)


def _attention_increment(q_t, p_t, hyper):
    s2 = hyper.sigma_ov ** 2
    if hyper.large_n:
        return s2 * p_t, s2 * p_t
    n = hyper.context_n
    inc = s2 * (q_t / n + (n - 1.0) * p_t / n)
    return inc, inc


def _mlp_increment(q_t, p_t, hyper):
    half = 0.5 * hyper.sigma_21 ** 2
    return half * q_t, half * q_t * kappa(p_t / q_t)


def _advance(q, p, q_t, p_t, layer, hyper):
    if layer % 2 == 0:
        dq, dp = _attention_increment(q_t, p_t, hyper)
    else:
        dq, dp = _mlp_increment(q_t, p_t, hyper)
    q, p = q + dq, p + dp
    # keep |p| <= q exactly; drift beyond the CovPair tolerance is a real error
    if p > q and p <= q * (1.0 + 1e-12):
        p = q
    return q, p


def step_attention(cov, hyper):
    """Covariance after one attention layer under uniform attention."""
    q_t, p_t = _tilde(hyper.phi.kind, hyper.phi.alpha, cov.q, cov.p)
    return CovPair(*_advance(cov.q, cov.p, q_t, p_t, 0, hyper))


def step_mlp(cov, hyper):
    """Covariance after one ReLU MLP layer."""
    q_t, p_t = _tilde(hyper.phi.kind, hyper.phi.alpha, cov.q, cov.p)
    return CovPair(*_advance(cov.q, cov.p, q_t, p_t, 1, hyper))


class LayerRecord(NamedTuple):
    """State entering layer ``layer`` and its normalized branch input."""

    layer: int
    parity: str
    cov: CovPair
    q_tilde: float
    p_tilde: float


@dataclass(frozen=True, eq=False)
class CovTrajectory:
    """Per-layer ``(q, p)`` from layer 0 to ``L = 2B``.

    ``q[l]``, ``p[l]`` hold the state entering layer ``l`` (``q[L]`` is the
    network output), and ``q_tilde[l]``, ``p_tilde[l]`` the covariance after
    ``phi`` at that state. Entry ``L`` is what a final normalization sees.
    """

    hyper: ModelHyper
    q: np.ndarray
    p: np.ndarray
    q_tilde: np.ndarray
    p_tilde: np.ndarray

    def __post_init__(self):
        for name in ("q", "p", "q_tilde", "p_tilde"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_layers(self):
        return len(self.q) - 1

    @property
    def n_blocks(self):
        return self.n_layers // 2

    @property
    def initial(self):
        return CovPair(self.q[0], self.p[0])

    @property
    def Q(self):
        """Block-level ``Q^b = q^{2b}`` for ``b = 0..B``."""
        return self.q[::2]

    @property
    def P(self):
        return self.p[::2]

    @property
    def cosine(self):
        return self.p / self.q

    def __len__(self):
        return len(self.q)

    def __getitem__(self, layer):
        layer = range(len(self.q))[layer]
        kind = FINAL if layer == self.n_layers else parity(layer)
        return LayerRecord(layer, kind, CovPair(self.q[layer], self.p[layer]),
                           float(self.q_tilde[layer]), float(self.p_tilde[layer]))

    def __iter__(self):
        for layer in range(len(self.q)):
            yield self[layer]

    def rows(self):
        """Rows ``(layer, parity, q, p, q_tilde, p_tilde)`` for CSV export."""
        return [(r.layer, r.parity, r.cov.q, r.cov.p, r.q_tilde, r.p_tilde) for r in self]


def run_trajectory(initial, hyper, blocks):
    """Integrate ``blocks`` attention+MLP blocks from ``initial``.

    Parameters
    ----------
    initial : CovPair
        ``(q^0, p^0)``; ``p^0`` must be non-negative.
    hyper : ModelHyper
    blocks : int
        Number of blocks ``B >= 1``.

    Returns
    -------
    CovTrajectory

    Raises
    ------
    UnsupportedRegimeError
        If ``initial.p < 0``; that regime is not analyzed.
    """
    blocks = int(blocks)
    if blocks < 1:
        raise DomainError(f"blocks must be >= 1, got {blocks}")
    if not isinstance(initial, CovPair):
        initial = CovPair(*initial)
    if initial.p < 0.0:
        raise UnsupportedRegimeError(f"negative p0 = {initial.p!r} is outside the analyzed regime")
    L = 2 * blocks
    q = np.empty(L + 1)
    p = np.empty(L + 1)
    q_t = np.empty(L + 1)
    p_t = np.empty(L + 1)
    kind, alpha = hyper.phi.kind, hyper.phi.alpha
    qc, pc = initial.q, initial.p
    for layer in range(L + 1):
        a, b = _tilde(kind, alpha, qc, pc)
        q[layer], p[layer], q_t[layer], p_t[layer] = qc, pc, a, b
        if layer < L:
            qc, pc = _advance(qc, pc, a, b, layer, hyper)
    return CovTrajectory(hyper, q, p, q_t, p_t)
