import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigprop.covariance import (ATTN, FINAL, MLP, CovTrajectory, ModelHyper, parity, run_trajectory, step_attention,
                                step_mlp)
from sigprop.errors import DomainError, UnsupportedRegimeError
from sigprop.kernels import CovPair, Nonlinearity, kappa
from sigprop.simulator import UNIFORM, TransformerConfig, forward, generate_permutation_symmetric, init_weights

PHIS = [Nonlinearity.layernorm(), Nonlinearity.erf(1.0), Nonlinearity.tanh(0.7)]


class TestModelHyper:
    def test_defaults(self):
        h = ModelHyper(0.3, 0.6)
        assert h.large_n and h.phi.kind == "layernorm"

    def test_parses_phi(self):
        assert ModelHyper(0.3, 0.6, phi="erf:0.5").phi == Nonlinearity.erf(0.5)

    @pytest.mark.parametrize("bad", [dict(sigma_ov=-1.0, sigma_21=1.0), dict(sigma_ov=1.0, sigma_21=math.nan),
                                     dict(sigma_ov=1.0, sigma_21=1.0, context_n=1),
                                     dict(sigma_ov=1.0, sigma_21=1.0, context_n=2.5)])
    def test_rejects(self, bad):
        with pytest.raises(DomainError):
            ModelHyper(**bad)

    def test_with_n(self):
        assert ModelHyper(0.3, 0.6).with_n(16).context_n == 16.0


class TestSteps:
    def test_attention_large_n_layernorm(self):
        out = step_attention(CovPair(1.0, 0.2), ModelHyper(1.0, 0.0))
        assert (out.q, out.p) == pytest.approx((1.2, 0.4))

    def test_attention_finite_n(self):
        out = step_attention(CovPair(2.0, 0.5), ModelHyper(1.0, 0.0, context_n=4))
        inc = 0.25 * 1.0 + 0.75 * 0.25
        assert (out.q, out.p) == pytest.approx((2.0 + inc, 0.5 + inc))

    def test_mlp_layernorm(self):
        out = step_mlp(CovPair(1.0, 0.2), ModelHyper(0.0, 1.0))
        assert out.q == pytest.approx(1.5)
        assert out.p == pytest.approx(0.2 + 0.5 * kappa(0.2))
        # reference value is Monte-Carlo rounded; the closed form gives 0.4123488
        assert out.p == pytest.approx(0.412354, rel=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 10.0), st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0),
           st.sampled_from(PHIS))
    def test_monotone_and_cauchy_schwarz(self, q, frac, sov, s21, phi):
        cov, hyper = CovPair(q, frac * q), ModelHyper(sov, s21, phi=phi)
        for step in (step_attention, step_mlp):
            out = step(cov, hyper)
            assert out.q >= cov.q and out.p >= cov.p
            assert out.p <= out.q
            # residual increments are at most the self increment
            assert out.p - cov.p <= out.q - cov.q + 1e-12

    def test_aligned_inputs_stay_aligned(self):
        hyper = ModelHyper(0.5, 1.2, phi="erf:1")
        cov = CovPair(1.0, 1.0)
        for step in (step_attention, step_mlp):
            out = step(cov, hyper)
            assert out.p == out.q


class TestMonteCarloOracle:
    """The recurrences against the sampled network at large width."""

    def _stats(self, h):
        gram = h @ h.T / h.shape[1]
        n = h.shape[0]
        return np.trace(gram) / n, (gram.sum() - np.trace(gram)) / (n * (n - 1))

    def test_attention_step(self):
        d, n, draws = 1024, 64, 24
        got = []
        for s in range(draws):
            cfg = TransformerConfig(d=d, n=n, blocks=1, sigma_o=1.0, sigma_v=1.0, sigma_1=0.0,
                                    attention_mode=UNIFORM, seed=s)
            toks = generate_permutation_symmetric(1.0, 0.2, n, d, seed=1000 + s)
            trace = forward(init_weights(cfg), toks.tokens, cfg)
            want = step_attention(CovPair(toks.q, toks.p), ModelHyper(1.0, 0.0, context_n=n))
            got.append(np.array(self._stats(trace.hs[1])) / (want.q, want.p))
        ratio = np.mean(got, axis=0)
        np.testing.assert_allclose(ratio, 1.0, rtol=0.03)

    def test_mlp_step(self):
        d, n, draws = 1024, 16, 24
        got = []
        for s in range(draws):
            cfg = TransformerConfig.from_products(1.0, 0.0, d=d, n=n, blocks=1, seed=s)
            toks = generate_permutation_symmetric(1.0, 0.2, n, d, seed=2000 + s)
            trace = forward(init_weights(cfg), toks.tokens, cfg)
            want = step_mlp(CovPair(toks.q, toks.p), ModelHyper(0.0, 1.0))
            got.append(np.array(self._stats(trace.hs[2])) / (want.q, want.p))
        ratio = np.mean(got, axis=0)
        np.testing.assert_allclose(ratio, 1.0, rtol=0.03)


class TestTrajectory:
    def test_shapes_and_indexing(self):
        traj = run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.3, 0.6), 5)
        assert isinstance(traj, CovTrajectory)
        assert traj.n_layers == 10 and traj.n_blocks == 5 and len(traj) == 11
        assert len(traj.Q) == 6 and traj.Q[0] == 1.0
        assert [r.parity for r in traj][:3] == [ATTN, MLP, ATTN]
        assert traj[-1].parity == FINAL
        assert traj.initial == CovPair(1.0, 0.2)

    def test_matches_manual_steps(self):
        hyper = ModelHyper(0.4, 0.9, context_n=8, phi="erf:0.6")
        traj = run_trajectory(CovPair(1.3, 0.4), hyper, 3)
        cov = CovPair(1.3, 0.4)
        for layer in range(6):
            cov = (step_attention if parity(layer) == ATTN else step_mlp)(cov, hyper)
            assert (traj.q[layer + 1], traj.p[layer + 1]) == (cov.q, cov.p)

    def test_arrays_are_read_only(self):
        traj = run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.3, 0.6), 2)
        with pytest.raises(ValueError):
            traj.q[0] = 2.0

    def test_negative_p0_unsupported(self):
        with pytest.raises(UnsupportedRegimeError):
            run_trajectory(CovPair(1.0, -0.1), ModelHyper(0.3, 0.6), 2)

    def test_blocks_positive(self):
        with pytest.raises(DomainError):
            run_trajectory(CovPair(1.0, 0.1), ModelHyper(0.3, 0.6), 0)

    def test_accepts_tuple(self):
        a = run_trajectory((1.0, 0.2), ModelHyper(0.3, 0.6), 3)
        b = run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.3, 0.6), 3)
        np.testing.assert_array_equal(a.q, b.q)

    def test_layernorm_linear_growth(self):
        # with LN the self increment per block is sigma_21^2 / 2 + sigma_ov^2 p~
        hyper = ModelHyper(0.0, 1.0)
        traj = run_trajectory(CovPair(1.0, 0.0), hyper, 50)
        np.testing.assert_allclose(np.diff(traj.Q), 0.5, rtol=1e-14)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.1, 3.0), st.floats(0.0, 1.0), st.floats(0.0, 1.5), st.floats(0.0, 1.5), st.sampled_from(PHIS))
    def test_cosine_in_unit_interval(self, q, frac, sov, s21, phi):
        traj = run_trajectory(CovPair(q, frac * q), ModelHyper(sov, s21, phi=phi), 20)
        assert np.all(traj.cosine >= 0) and np.all(traj.cosine <= 1.0)
        assert np.all(np.diff(traj.q) >= 0)

    def test_rows(self):
        rows = run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.3, 0.6), 1).rows()
        assert [r[:2] for r in rows] == [(0, ATTN), (1, MLP), (2, FINAL)]
