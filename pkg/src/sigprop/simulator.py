"""A pre-normalized transformer at initialization with exact reverse-mode VJPs.

Tokens are row vectors: activations at layer ``l`` form an ``(n, d)`` array.
Even layers are (multi-head) self-attention, odd layers a ReLU MLP with
hidden width ``4d``; each branch reads ``phi(h)`` (RMS LayerNorm, ``erf`` or
``tanh``) and is added back to the residual stream. There are no biases and
no learnable norm parameters.

Random numbers come from NumPy's counter-based ``Philox`` generator. Every
weight matrix gets its own stream whose key is a BLAKE2b hash of
``(seed, block, tag)``, so adding blocks or heads never reshuffles the others.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .covariance import ModelHyper
from .errors import DomainError, NonFiniteActivationError
from .kernels import LAYERNORM, Nonlinearity

__all__ = [
    "SOFTMAX",
    "UNIFORM",
    "VIT_SIGMA",
    "TransformerConfig",
    "BlockWeights",
    "Weights",
    "ActivationTrace",
    "GeneratedTokens",
    "rng_for",
    "derive_seed",
    "init_weights",
    "forward",
    "vjp",
    "vjp_sweep",
    "generate_permutation_symmetric",
    "token_statistics",
]

SOFTMAX = "softmax"
UNIFORM = "uniform"
# per-matrix scales matching a std-0.02 initialization at width 768
VIT_SIGMA = 0.02 * math.sqrt(768.0)
VIT_SIGMA_2 = 0.02 * math.sqrt(4 * 768.0)


def _digest(seed, path, size):
    text = ":".join(str(x) for x in (int(seed), *path)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=size).digest(), "little")


def rng_for(seed, *path):
    """Independent ``Philox`` generator keyed by ``seed`` and a path of labels."""
    return np.random.Generator(np.random.Philox(key=_digest(seed, path, 16)))


def derive_seed(seed, *path):
    """Deterministic 63-bit child seed."""
    return _digest(seed, path, 8) >> 1


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture, initialization scales and seed of the toy transformer.

    Parameters
    ----------
    d, n, blocks : int
        Width, context size and number of blocks ``B`` (``L = 2B`` layers).
    heads : int
        Attention heads; must divide ``d``.
    norm : Nonlinearity or str
        Branch-input map, also used as the final normalization.
    sigma_o, sigma_v, sigma_q, sigma_k, sigma_1, sigma_2 : float
        Entry variance is ``sigma^2 / d`` except ``W_2``, which uses ``sigma_2^2 / (4d)``.
    final_norm : bool
        Apply ``norm`` once more after the last block.
    attention_mode : {"softmax", "uniform"}
        ``"uniform"`` fixes every attention weight to ``1/n``.
    seed : int
    full_layernorm : bool
        Subtract the feature mean before RMS scaling (LayerNorm only).
    """

    d: int = 64
    n: int = 8
    blocks: int = 2
    heads: int = 1
    norm: Nonlinearity = field(default_factory=Nonlinearity)
    sigma_o: float = VIT_SIGMA
    sigma_v: float = VIT_SIGMA
    sigma_q: float = VIT_SIGMA
    sigma_k: float = VIT_SIGMA
    sigma_1: float = VIT_SIGMA
    sigma_2: float = VIT_SIGMA_2
    final_norm: bool = False
    attention_mode: str = SOFTMAX
    seed: int = 0
    full_layernorm: bool = False

    def __post_init__(self):
        for name in ("d", "n", "blocks", "heads"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.d % self.heads:
            raise DomainError(f"heads = {self.heads} does not divide d = {self.d}")
        for name in ("sigma_o", "sigma_v", "sigma_q", "sigma_k", "sigma_1", "sigma_2"):
            value = float(getattr(self, name))
            if not (value >= 0.0 and math.isfinite(value)):
                raise DomainError(f"{name} must be finite and non-negative, got {value!r}")
            object.__setattr__(self, name, value)
        if self.attention_mode not in (SOFTMAX, UNIFORM):
            raise DomainError(f"attention_mode must be {SOFTMAX!r} or {UNIFORM!r}, got {self.attention_mode!r}")
        norm = self.norm if isinstance(self.norm, Nonlinearity) else Nonlinearity.parse(self.norm)
        if self.full_layernorm and norm.kind != LAYERNORM:
            raise DomainError("full_layernorm only applies to the LayerNorm variant")
        object.__setattr__(self, "norm", norm)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def from_products(cls, sigma_21, sigma_ov, **kwargs):
        """Config whose ``sigma_2 sigma_1`` and ``sigma_O sigma_V`` equal the given products.

        ``sigma_O = sigma_V`` and ``sigma_2 = 2 sigma_1``, the ratio of a
        uniform-std initialization; ``sigma_Q`` and ``sigma_K`` keep their defaults.
        """
        s_ov = math.sqrt(float(sigma_ov))
        s_1 = math.sqrt(float(sigma_21) / 2.0)
        return cls(sigma_o=s_ov, sigma_v=s_ov, sigma_1=s_1, sigma_2=2.0 * s_1, **kwargs)

    @property
    def sigma_ov(self):
        return self.sigma_o * self.sigma_v

    @property
    def sigma_21(self):
        return self.sigma_2 * self.sigma_1

    @property
    def n_layers(self):
        return 2 * self.blocks

    @property
    def d_head(self):
        return self.d // self.heads

    @property
    def hidden(self):
        return 4 * self.d

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def hyper(self, context_n=math.inf):
        """Theory hyperparameters implied by this config."""
        return ModelHyper(self.sigma_ov, self.sigma_21, context_n, self.norm)


class BlockWeights(NamedTuple):
    """Weights of one block. Head ``h`` owns rows ``h*d_h:(h+1)*d_h`` of
    ``w_q``, ``w_k``, ``w_v`` and the same columns of ``w_o``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray


@dataclass(frozen=True, eq=False)
class Weights:
    config: TransformerConfig
    blocks: tuple


def _gaussian(rng, shape, std):
    if std == 0.0:
        return np.zeros(shape)
    return rng.standard_normal(shape) * std


def init_weights(config):
    """Sample all weights; deterministic in ``config.seed``.

    In uniform-attention mode ``W_Q`` and ``W_K`` are never used and are
    stored as zeros without drawing from their streams.
    """
    d, h4 = config.d, config.hidden
    sd = 1.0 / math.sqrt(d)
    blocks = []
    for b in range(config.blocks):
        def draw(tag, shape, std):
            return _gaussian(rng_for(config.seed, b, tag), shape, std)

        if config.attention_mode == UNIFORM:
            w_q = w_k = np.zeros((d, d))
        else:
            w_q = draw("W_Q", (d, d), config.sigma_q * sd)
            w_k = draw("W_K", (d, d), config.sigma_k * sd)
        blocks.append(BlockWeights(
            w_q=w_q,
            w_k=w_k,
            w_v=draw("W_V", (d, d), config.sigma_v * sd),
            w_o=draw("W_O", (d, d), config.sigma_o * sd),
            w_1=draw("W_1", (h4, d), config.sigma_1 * sd),
            w_2=draw("W_2", (d, h4), config.sigma_2 / math.sqrt(h4)),
        ))
    for bw in blocks:
        for arr in bw:
            arr.setflags(write=False)
    return Weights(config, tuple(blocks))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


class _NormCache(NamedTuple):
    h: np.ndarray
    out: np.ndarray
    rms: np.ndarray


def _norm_forward(h, config):
    phi = config.norm
    if phi.kind == LAYERNORM:
        x = h - h.mean(axis=-1, keepdims=True) if config.full_layernorm else h
        rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
        return _NormCache(h, x / rms, rms)
    return _NormCache(h, phi(h), None)


def _norm_vjp(cache, g, config):
    phi = config.norm
    if phi.kind == LAYERNORM:
        y = cache.out
        dx = (g - y * np.mean(g * y, axis=-1, keepdims=True)) / cache.rms
        if config.full_layernorm:
            dx = dx - dx.mean(axis=-1, keepdims=True)
        return dx
    return g * phi.derivative(cache.h)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class _AttnCache(NamedTuple):
    norm: _NormCache
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray


class _MlpCache(NamedTuple):
    norm: _NormCache
    pre: np.ndarray


def _split_heads(x, heads):
    n, d = x.shape[-2:]
    return np.swapaxes(x.reshape(*x.shape[:-1], heads, d // heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    return x.reshape(*x.shape[:-2], -1)


def _attention_forward(h, bw, config):
    nc = _norm_forward(h, config)
    x = nc.out
    heads, n = config.heads, config.n
    v = _split_heads(x @ bw.w_v.T, heads)
    if config.attention_mode == UNIFORM:
        q = k = None
        a = np.full((heads, n, n), 1.0 / n)
    else:
        q = _split_heads(x @ bw.w_q.T, heads)
        k = _split_heads(x @ bw.w_k.T, heads)
        s = q @ np.swapaxes(k, -1, -2) / math.sqrt(config.d_head)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
    out = _merge_heads(a @ v) @ bw.w_o.T
    return h + out, _AttnCache(nc, q, k, v, a)


def _attention_vjp(cache, g, bw, config):
    heads = config.heads
    dz = _split_heads(g @ bw.w_o, heads)
    dv = np.swapaxes(cache.a, -1, -2) @ dz
    dx = _merge_heads(dv) @ bw.w_v
    if config.attention_mode == SOFTMAX:
        a = cache.a
        da = dz @ np.swapaxes(cache.v, -1, -2)
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / math.sqrt(config.d_head)
        dq = ds @ cache.k
        dk = np.swapaxes(ds, -1, -2) @ cache.q
        dx = dx + _merge_heads(dq) @ bw.w_q + _merge_heads(dk) @ bw.w_k
    return g + _norm_vjp(cache.norm, dx, config)


def _mlp_forward(h, bw, config):
    nc = _norm_forward(h, config)
    pre = nc.out @ bw.w_1.T
    return h + np.maximum(pre, 0.0) @ bw.w_2.T, _MlpCache(nc, pre)


def _mlp_vjp(cache, g, bw, config):
    dpre = (g @ bw.w_2) * (cache.pre > 0.0)
    return g + _norm_vjp(cache.norm, dpre @ bw.w_1, config)


# ---------------------------------------------------------------------------
# Whole network
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Cached forward pass.

    ``hs[l]`` is ``h^l`` for ``l = 0..L``; with a final normalization,
    ``hs[L + 1]`` is its output and ``output_layer == L + 1``.
    """

    config: TransformerConfig
    hs: tuple
    caches: tuple
    final_cache: _NormCache = None

    @property
    def n_layers(self):
        return self.config.n_layers

    @property
    def output_layer(self):
        return len(self.hs) - 1

    @property
    def output(self):
        return self.hs[-1]

    def block_output(self, b):
        return self.hs[2 * b]


def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivationError(layer)


def forward(weights, tokens, config=None):
    """Run the network on an ``(n, d)`` token matrix and cache what VJPs need."""
    config = weights.config if config is None else config
    h = np.asarray(tokens, dtype=float)
    if h.shape != (config.n, config.d):
        raise DomainError(f"tokens have shape {h.shape}, expected {(config.n, config.d)}")
    _check_finite(h, 0)
    hs, caches = [h], []
    for layer in range(config.n_layers):
        bw = weights.blocks[layer // 2]
        step = _attention_forward if layer % 2 == 0 else _mlp_forward
        h, cache = step(h, bw, config)
        _check_finite(h, layer + 1)
        hs.append(h)
        caches.append(cache)
    final = None
    if config.final_norm:
        final = _norm_forward(h, config)
        _check_finite(final.out, config.n_layers + 1)
        hs.append(final.out)
    for x in hs:
        x.setflags(write=False)
    return ActivationTrace(config, tuple(hs), tuple(caches), final)


def _check_range(trace, l_hi, l_lo):
    if not (0 <= l_lo <= l_hi <= trace.output_layer):
        raise DomainError(f"need 0 <= l_lo <= l_hi <= {trace.output_layer}, got l_lo={l_lo}, l_hi={l_hi}")


def vjp_sweep(trace, weights, cotangent, l_hi, l_lo=0):
    """Pull ``cotangent`` from layer ``l_hi`` back to every layer down to ``l_lo``.

    ``cotangent`` may carry leading batch dimensions (``(..., n, d)``).

    Yields
    ------
    (int, numpy.ndarray)
        ``(l, J^{l_hi, l}^T v)`` for ``l = l_hi, l_hi - 1, ..., l_lo``.
    """
    _check_range(trace, l_hi, l_lo)
    config = trace.config
    g = np.asarray(cotangent, dtype=float)
    if g.shape[-2:] != (config.n, config.d):
        raise DomainError(f"cotangent has trailing shape {g.shape[-2:]}, expected {(config.n, config.d)}")
    yield l_hi, g
    layer = l_hi
    if layer == config.n_layers + 1 and layer > l_lo:
        g = _norm_vjp(trace.final_cache, g, config)
        layer -= 1
        yield layer, g
    while layer > l_lo:
        layer -= 1
        bw = weights.blocks[layer // 2]
        cache = trace.caches[layer]
        g = _attention_vjp(cache, g, bw, config) if layer % 2 == 0 else _mlp_vjp(cache, g, bw, config)
        yield layer, g


def vjp(trace, weights, cotangent, l_hi, l_lo):
    """``(J^{l_hi, l_lo})^T v`` for the cached forward pass."""
    g = None
    for _, g in vjp_sweep(trace, weights, cotangent, l_hi, l_lo):
        pass
    return g


class GeneratedTokens(NamedTuple):
    """Synthetic tokens with their empirical ``(q, p)``."""

    tokens: np.ndarray
    q: float
    p: float


def token_statistics(tokens):
    """Position-averaged ``(q, p)``: mean self dot product and mean cross dot product over ``d``."""
    h = np.asarray(tokens, dtype=float)
    n, d = h.shape
    gram = h @ h.T / d
    q = float(np.trace(gram) / n)
    p = float((gram.sum() - np.trace(gram)) / (n * (n - 1))) if n > 1 else math.nan
    return q, p


def generate_permutation_symmetric(q0, p0, n, d, seed):
    """Tokens ``h_s = sqrt(p0) g + sqrt(q0 - p0) g_s`` with standard Gaussian ``g``, ``g_s``.

    The expected normalized self dot product is ``q0`` and the cross dot
    product ``p0``.
    """
    q0, p0 = float(q0), float(p0)
    if not (0.0 <= p0 <= q0) or not q0 > 0.0:
        raise DomainError(f"need 0 <= p0 <= q0 and q0 > 0, got q0={q0!r}, p0={p0!r}")
    rng = rng_for(seed, "tokens", n, d)
    shared = rng.standard_normal(d)
    own = rng.standard_normal((n, d))
    tokens = math.sqrt(p0) * shared + math.sqrt(q0 - p0) * own
    return GeneratedTokens(tokens, *token_statistics(tokens))
