import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigprop.errors import DomainError, NonFiniteActivationError
from sigprop.simulator import (SOFTMAX, UNIFORM, VIT_SIGMA, TransformerConfig, derive_seed, forward,
                               generate_permutation_symmetric, init_weights, rng_for, token_statistics, vjp,
                               vjp_sweep)

VARIANTS = [
    dict(),
    dict(heads=4),
    dict(norm="erf:0.8", final_norm=True),
    dict(norm="tanh:1.2", attention_mode=UNIFORM),
    dict(full_layernorm=True, final_norm=True, heads=2),
]


def _setup(seed=0, **kw):
    cfg = TransformerConfig(d=16, n=5, blocks=2, seed=seed, **kw)
    cfg = TransformerConfig(**{**cfg.__dict__, "sigma_o": 1.0, "sigma_v": 1.0, "sigma_q": 2.0, "sigma_k": 2.0})
    w = init_weights(cfg)
    x = rng_for(seed, "x").standard_normal((cfg.n, cfg.d))
    return cfg, w, x


class TestRng:
    def test_streams_are_reproducible(self):
        a = rng_for(3, "a", 1).standard_normal(4)
        np.testing.assert_array_equal(a, rng_for(3, "a", 1).standard_normal(4))

    def test_paths_are_independent(self):
        a = rng_for(3, "a", 1).standard_normal(1000)
        b = rng_for(3, "a", 2).standard_normal(1000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.15
        assert not np.array_equal(a, b)

    def test_derive_seed(self):
        s = derive_seed(1, "weights", 0)
        assert 0 <= s < 2 ** 63 and s == derive_seed(1, "weights", 0) != derive_seed(1, "weights", 1)


class TestConfig:
    def test_defaults(self):
        cfg = TransformerConfig()
        assert cfg.sigma_o == VIT_SIGMA and cfg.sigma_2 == pytest.approx(2 * VIT_SIGMA)
        assert cfg.n_layers == 4 and cfg.hidden == 256

    def test_from_products(self):
        cfg = TransformerConfig.from_products(0.61, 0.31, d=8)
        assert cfg.sigma_21 == pytest.approx(0.61) and cfg.sigma_ov == pytest.approx(0.31)
        assert cfg.sigma_2 == pytest.approx(2 * cfg.sigma_1) and cfg.d == 8

    def test_hyper(self):
        h = TransformerConfig.from_products(0.61, 0.31, norm="erf:2").hyper(32)
        assert (h.sigma_21, h.sigma_ov, h.context_n) == pytest.approx((0.61, 0.31, 32))
        assert h.phi.alpha == 2.0

    @pytest.mark.parametrize("bad", [dict(d=0), dict(d=10, heads=3), dict(sigma_o=-1.0),
                                     dict(attention_mode="linear"), dict(norm="erf", full_layernorm=True),
                                     dict(n=2.5)])
    def test_rejects(self, bad):
        with pytest.raises(DomainError):
            TransformerConfig(**bad)


class TestWeights:
    def test_shapes_and_scale(self):
        cfg = TransformerConfig(d=64, blocks=1, sigma_1=1.0, sigma_2=2.0)
        bw = init_weights(cfg).blocks[0]
        assert bw.w_1.shape == (256, 64) and bw.w_2.shape == (64, 256)
        assert bw.w_1.std() == pytest.approx(1 / 8, rel=0.05)
        assert bw.w_2.std() == pytest.approx(2 / 16, rel=0.05)

    def test_deterministic_and_read_only(self):
        a, b = init_weights(TransformerConfig(seed=4)), init_weights(TransformerConfig(seed=4))
        np.testing.assert_array_equal(a.blocks[1].w_o, b.blocks[1].w_o)
        with pytest.raises(ValueError):
            a.blocks[0].w_o[0, 0] = 1.0

    def test_uniform_mode_skips_query_key(self):
        soft = init_weights(TransformerConfig(seed=1))
        uni = init_weights(TransformerConfig(seed=1, attention_mode=UNIFORM))
        assert not uni.blocks[0].w_q.any()
        np.testing.assert_array_equal(soft.blocks[0].w_v, uni.blocks[0].w_v)


class TestForward:
    def test_trace_layout(self):
        cfg, w, x = _setup(final_norm=True)
        trace = forward(w, x)
        assert len(trace.hs) == cfg.n_layers + 2 and trace.output_layer == cfg.n_layers + 1
        np.testing.assert_array_equal(trace.hs[0], x)
        np.testing.assert_array_equal(trace.block_output(1), trace.hs[2])

    def test_final_layernorm_output_has_unit_rms(self):
        cfg, w, x = _setup(final_norm=True)
        np.testing.assert_allclose(np.mean(forward(w, x).output ** 2, axis=-1), 1.0)

    def test_zero_branches_are_identity(self):
        cfg = TransformerConfig(d=8, n=3, sigma_o=0.0, sigma_2=0.0)
        x = np.arange(24.0).reshape(3, 8)
        np.testing.assert_array_equal(forward(init_weights(cfg), x).output, x)

    def test_shape_checked(self):
        cfg, w, x = _setup()
        with pytest.raises(DomainError):
            forward(w, x[:, :-1])

    def test_non_finite_reported_with_layer(self):
        cfg, w, x = _setup()
        x[0, 0] = np.inf
        with pytest.raises(NonFiniteActivationError) as err:
            forward(w, x)
        assert err.value.layer == 0

    @pytest.mark.parametrize("kw", VARIANTS)
    def test_permutation_equivariant(self, kw):
        cfg, w, x = _setup(**kw)
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(forward(w, x[perm]).output, forward(w, x).output[perm], rtol=1e-12)

    def test_heads_change_output(self):
        x = rng_for(0, "x").standard_normal((5, 16))
        outs = [forward(init_weights(TransformerConfig(d=16, n=5, heads=h, sigma_q=3.0, sigma_k=3.0)), x).output
                for h in (1, 4)]
        assert not np.allclose(*outs)

    def test_uniform_attention_averages(self):
        cfg = TransformerConfig(d=8, n=4, blocks=1, attention_mode=UNIFORM, sigma_o=1.0, sigma_v=1.0, sigma_2=0.0)
        x = rng_for(0, "x").standard_normal((4, 8))
        out = forward(init_weights(cfg), x).hs[1] - x
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-14)


class TestVjp:
    @pytest.mark.parametrize("kw", VARIANTS)
    def test_matches_finite_difference(self, kw):
        cfg, w, x = _setup(seed=2, **kw)
        top = forward(w, x).output_layer
        rng = rng_for(9, "dir")
        u, v = rng.standard_normal(x.shape), rng.standard_normal(x.shape)
        g = vjp(forward(w, x), w, v, top, 0)
        eps = 1e-6
        fd = np.sum(v * (forward(w, x + eps * u).output - forward(w, x - eps * u).output)) / (2 * eps)
        assert np.sum(g * u) == pytest.approx(fd, rel=1e-6)

    def test_intermediate_layers(self):
        cfg, w, x = _setup(seed=3)
        trace = forward(w, x)
        v = rng_for(1, "v").standard_normal(x.shape)
        u = rng_for(2, "u").standard_normal(x.shape)
        g = vjp(trace, w, v, 3, 1)
        # rerun layers 1..3 from a perturbed h^1
        sub = TransformerConfig(**{**cfg.__dict__, "blocks": 2})

        def tail(h1):
            from sigprop.simulator import _attention_forward, _mlp_forward
            h, _ = _mlp_forward(h1, w.blocks[0], sub)
            h, _ = _attention_forward(h, w.blocks[1], sub)
            return h
        eps = 1e-6
        h1 = trace.hs[1]
        fd = np.sum(v * (tail(h1 + eps * u) - tail(h1 - eps * u))) / (2 * eps)
        assert np.sum(g * u) == pytest.approx(fd, rel=1e-6)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_cotangent(self, a, b):
        cfg, w, x = _setup(seed=5, heads=2)
        trace = forward(w, x)
        rng = rng_for(0, "c")
        v1, v2 = rng.standard_normal((2, *x.shape))
        lhs = vjp(trace, w, a * v1 + b * v2, 4, 0)
        rhs = a * vjp(trace, w, v1, 4, 0) + b * vjp(trace, w, v2, 4, 0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_batched_equals_looped(self):
        cfg, w, x = _setup(seed=6, norm="erf:1", final_norm=True)
        trace = forward(w, x)
        v = rng_for(0, "b").standard_normal((3, *x.shape))
        batched = vjp(trace, w, v, 5, 0)
        for i in range(3):
            np.testing.assert_allclose(batched[i], vjp(trace, w, v[i], 5, 0), rtol=1e-13, atol=1e-15)

    def test_sweep_order(self):
        cfg, w, x = _setup()
        trace = forward(w, x)
        layers = [l for l, _ in vjp_sweep(trace, w, np.ones_like(x), 4, 1)]
        assert layers == [4, 3, 2, 1]

    def test_range_checked(self):
        cfg, w, x = _setup()
        trace = forward(w, x)
        with pytest.raises(DomainError):
            vjp(trace, w, x, 5, 0)
        with pytest.raises(DomainError):
            vjp(trace, w, x, 1, 2)


class TestTokens:
    def test_statistics(self):
        toks = generate_permutation_symmetric(1.5, 0.5, 64, 4096, seed=0)
        assert toks.tokens.shape == (64, 4096)
        assert toks.q == pytest.approx(1.5, rel=0.03) and toks.p == pytest.approx(0.5, rel=0.06)
        assert (toks.q, toks.p) == token_statistics(toks.tokens)

    def test_deterministic(self):
        a = generate_permutation_symmetric(1.0, 0.3, 4, 8, seed=11).tokens
        np.testing.assert_array_equal(a, generate_permutation_symmetric(1.0, 0.3, 4, 8, seed=11).tokens)

    def test_aligned(self):
        toks = generate_permutation_symmetric(2.0, 2.0, 3, 16, seed=0).tokens
        np.testing.assert_array_equal(toks[0], toks[2])

    @pytest.mark.parametrize("q0,p0", [(1.0, 1.5), (1.0, -0.1), (0.0, 0.0)])
    def test_rejects(self, q0, p0):
        with pytest.raises(DomainError):
            generate_permutation_symmetric(q0, p0, 4, 8, seed=0)

    def test_single_token_cross_is_nan(self):
        assert math.isnan(token_statistics(np.ones((1, 4)))[1])
