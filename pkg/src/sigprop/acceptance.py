"""Acceptance checks shared by the test suite and ``sigprop check``.

Each ``criterion_<k>`` runs one check end to end and returns a
``CriterionResult``; nothing here loosens a tolerance after seeing the data.
"""

from __future__ import annotations

import math
import time
from typing import NamedTuple

import numpy as np

from .apjn import backward_extended, backward_simplified, forward_extended, forward_simplified
from .asymptotics import asymptotic_law, g_of_c, saturated_cosine_trajectory, solve_c_star
from .covariance import ModelHyper, run_trajectory
from .kernels import (CovPair, Nonlinearity, hat_kappa, hat_q, kappa, propagate_phi, propagate_phi_by_quadrature,
                      propagate_phi_prime, propagate_phi_prime_by_quadrature)
from .measurement import (backward_apjn_blocks, covariance_profile, depth_regions, draw_probes, exact_apjn, gmfe,
                          weight_seed)
from .simulator import (UNIFORM, TransformerConfig, forward, generate_permutation_symmetric, init_weights, rng_for,
                        token_statistics, vjp, vjp_sweep)

__all__ = ["CriterionResult", "CRITERIA", "run_criteria"]

SIGMA_21 = 0.61
SIGMA_OV = 0.31
NORM_VARIANTS = (Nonlinearity.layernorm(), Nonlinearity.erf(1.0), Nonlinearity.tanh(1.0))


class CriterionResult(NamedTuple):
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d}: {self.title} ({self.seconds:.1f}s / {self.budget:g}s) {self.detail}"


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------------------


def _criterion_1():
    worst = 0.0
    for q in (0.1, 0.5, 1.0, 4.0, 25.0):
        for frac in (0.0, 0.25, 0.5, 0.9, 1.0):
            cov = CovPair(q, frac * q)
            phi = Nonlinearity.erf(1.0)
            closed = (*propagate_phi(cov, phi).__dict__.values(), *propagate_phi_prime(cov, phi).__dict__.values())
            quad = (*propagate_phi_by_quadrature(cov, phi), *propagate_phi_prime_by_quadrature(cov, phi))
            for a, b in zip(closed, quad):
                worst = max(worst, abs(a - b) / max(abs(a), 1e-300) if a != 0 else abs(b))
    rng = rng_for(2024, "acceptance", 1)
    z1 = rng.standard_normal(1_000_000)
    z2 = rng.standard_normal(1_000_000)
    worst_z = 0.0
    for rho in (-0.9, -0.5, 0.0, 0.3, 0.7, 0.99):
        u, v = z1, rho * z1 + math.sqrt(1 - rho * rho) * z2
        # kappa is E[relu(u) relu(v)] normalized by q/2 = 1/2
        s = 2.0 * np.maximum(u, 0) * np.maximum(v, 0)
        worst_z = max(worst_z, abs(s.mean() - kappa(rho)) / (s.std(ddof=1) / 1e3))
        s = ((u > 0) & (v > 0)).astype(float)
        worst_z = max(worst_z, abs(s.mean() - hat_kappa(rho)) / (s.std(ddof=1) / 1e3))
    passed = worst <= 1e-8 and worst_z <= 4.0
    return passed, f"max rel err erf closed vs quadrature {worst:.2e} (<= 1e-8); max MC z-score {worst_z:.2f} (<= 4)"


def _criterion_2():
    worst = 0.0
    for phi in NORM_VARIANTS:
        cfg = TransformerConfig(d=8, n=4, blocks=2, heads=2, norm=phi, final_norm=True, seed=11)
        w = init_weights(cfg)
        x = generate_permutation_symmetric(1.0, 0.2, 4, 8, seed=3).tokens
        trace = forward(w, x)
        rng = rng_for(7, "fd", str(phi))
        for _ in range(3):
            u = rng.standard_normal(x.shape)
            v = rng.standard_normal(x.shape)
            eps = 1e-5
            jvp = (forward(w, x + eps * u).output - forward(w, x - eps * u).output) / (2 * eps)
            lhs = float(np.sum(jvp * v))
            rhs = float(np.sum(vjp(trace, w, v, trace.output_layer, 0) * u))
            worst = max(worst, _rel(lhs, rhs))
    return worst <= 1e-6, f"max relative error <v, J u> vs <J^T v, u> = {worst:.2e} (<= 1e-6)"


def _criterion_3():
    cfg = TransformerConfig(d=8, n=4, blocks=2, norm=Nonlinearity.erf(1.0), seed=5)
    w = init_weights(cfg)
    x = generate_permutation_symmetric(1.0, 0.2, 4, 8, seed=1).tokens
    L = cfg.n_layers
    exact = exact_apjn(cfg, x, 0, L, weights=w)
    trace = forward(w, x)
    reps = 400
    counts = np.array([1, 4, 16, 64, 256])
    rms = []
    rng = rng_for(3, "acceptance", "hutchinson")
    for m in counts:
        v = draw_probes(rng, (reps * m, cfg.n, cfg.d))
        g = vjp(trace, w, v, L, 0)
        est = (np.einsum("pij,pij->p", g, g) / (cfg.n * cfg.d)).reshape(reps, m).mean(axis=1)
        rms.append(math.sqrt(np.mean((est - exact) ** 2)))
    slope = np.polyfit(np.log(counts), np.log(rms), 1)[0]
    return abs(slope + 0.5) <= 0.1, f"exact APJN {exact:.4f}; error-vs-probes slope {slope:.3f} (-0.5 +/- 0.1)"


def _criterion_4():
    d, n, B, seeds = 512, 32, 8, 64
    tokens = generate_permutation_symmetric(1.0, 0.2, n, d, seed=4)
    worst = 0.0
    parts = []
    for phi in NORM_VARIANTS:
        cfg = TransformerConfig.from_products(SIGMA_21, SIGMA_OV, d=d, n=n, blocks=B, norm=phi,
                                              attention_mode=UNIFORM, seed=40)
        Q = np.zeros(B + 1)
        P = np.zeros(B + 1)
        for i in range(seeds):
            c = cfg.with_seed(weight_seed(cfg, i))
            stats = covariance_profile(forward(init_weights(c), tokens.tokens, c))
            Q += np.array([s.q_mean for s in stats]) / seeds
            P += np.array([s.p_mean for s in stats]) / seeds
        traj = run_trajectory(CovPair(tokens.q, tokens.p), cfg.hyper(context_n=n), B)
        err = max(np.max(np.abs(Q / traj.Q - 1)), np.max(np.abs(P / traj.P - 1)))
        worst = max(worst, err)
        parts.append(f"{phi}: {err:.2%}")
    return worst <= 0.05, "max relative deviation of (Q^b, P^b): " + ", ".join(parts) + " (<= 5%)"


def _criterion_5():
    d, n, B = 256, 32, 16
    tokens = generate_permutation_symmetric(1.0, 0.2, n, d, seed=5)
    regions = depth_regions(B)
    worst = 0.0
    parts = []
    for phi in (Nonlinearity.layernorm(), Nonlinearity.erf(0.4), Nonlinearity.erf(1.0), Nonlinearity.erf(1.9)):
        cfg = TransformerConfig.from_products(SIGMA_21, SIGMA_OV, d=d, n=n, blocks=B, norm=phi, seed=50)
        measured = np.array([e.value for e in backward_apjn_blocks(cfg, tokens.tokens, n_probes=10, n_seeds=8)])
        theory = backward_simplified(run_trajectory(CovPair(tokens.q, tokens.p), cfg.hyper(), B)).block_values
        scores = {k: gmfe(theory[v], measured[v]) for k, v in regions.items()}
        worst = max(worst, *scores.values())
        parts.append(f"{phi}: " + "/".join(f"{scores[k]:.3f}" for k in ("early", "middle", "deep")))
    return worst <= 1.25, "GMFE early/middle/deep " + "; ".join(parts) + " (<= 1.25)"


def _slope_fit_zeta(s21, sov, initial, blocks=10_000):
    hyper = ModelHyper(sov, s21, phi=Nonlinearity.layernorm())
    log_j = forward_simplified(run_trajectory(initial, hyper, blocks)).block_log_j
    b = np.arange(blocks + 1)
    m = b >= blocks // 10
    return np.polyfit(np.log(b[m]), log_j[m], 1)[0], asymptotic_law(hyper).zeta


def _criterion_6():
    worst = 0.0
    for s21 in (0.3, 0.6, 1.0):
        for sov in (0.15, 0.3, 1.2):
            slope, zeta = _slope_fit_zeta(s21, sov, CovPair(0.5, 0.25))
            worst = max(worst, abs(slope - zeta))
    return worst <= 0.02, f"initial (q0, p0) = (0.5, 0.25); max |slope - zeta| = {worst:.4f} (<= 0.02)"


def _criterion_7():
    worst = 0.0
    B = 100_000
    for s21 in (0.6, 1.0):
        for sov in (0.0, 0.31):
            hyper = ModelHyper(sov, s21, phi=Nonlinearity.erf(1.0))
            law = asymptotic_law(hyper)
            log_j = forward_simplified(run_trajectory(CovPair(0.5, 0.25), hyper, B)).block_log_j
            b = np.arange(B + 1)
            m = b >= B // 2
            y = log_j[m] + law.lambda_inv / 8.0 * np.log(b[m])
            slope = np.polyfit(np.sqrt(b[m]), y, 1)[0]
            worst = max(worst, _rel(slope, math.sqrt(law.lambda_inv)))
    return worst <= 0.02, f"max relative error of fitted 1/sqrt(lambda) = {worst:.2%} (<= 2%)"


def _criterion_8():
    parts = []
    ok = True
    blocks = 10_000
    b = np.arange(blocks + 1)
    window = (b >= 1000) & (b <= 10_000)
    for phi in (Nonlinearity.erf(1.0), Nonlinearity.layernorm()):
        hyper = ModelHyper(0.31, 0.6, phi=phi)
        fp = solve_c_star(hyper)
        cos = run_trajectory(CovPair(0.5, 0.25), hyper, blocks).cosine[::2]
        gap = abs(cos[-1] - fp.c_star)
        mu_fit = -np.polyfit(np.log(b[window]), np.log(np.abs(cos[window] - fp.c_star)), 1)[0]
        sat = saturated_cosine_trajectory(hyper, CovPair(0.5, 0.25), blocks)
        mu_sat = -np.polyfit(np.log(b[window]), np.log(np.abs(sat[window] - fp.c_star)), 1)[0]
        ok &= gap <= 1e-3 and abs(mu_fit - fp.mu) <= 0.1 * fp.mu
        parts.append(f"{phi}: |c^b - c*| = {gap:.2e}, mu fit {mu_fit:.3f} vs mu {fp.mu:.3f} "
                     f"(saturated-increment model: mu fit {mu_sat:.3f})")
    worst_ln = 0.0
    for s21 in (0.3, 0.6, 1.0):
        for sov in (0.15, 0.3, 1.2):
            fp = solve_c_star(ModelHyper(sov, s21))
            worst_ln = max(worst_ln, abs(fp.mu - sov ** 2 / (sov ** 2 + 0.5 * s21 ** 2)))
    ok &= worst_ln <= 1e-15
    parts.append(f"LayerNorm closed-form mu max diff {worst_ln:.1e}")
    return ok, "; ".join(parts)


def _criterion_9():
    worst = 0.0
    violations = []
    for phi in (Nonlinearity.erf(1.0), Nonlinearity.tanh(1.0)):
        for s21 in (0.3, 0.6, 1.0):
            for sov in (0.0, 0.3, 1.2):
                hyper = ModelHyper(sov, s21, phi=phi)
                bad = [e for e in np.geomspace(1e-6, 1e-2, 41) if not g_of_c(1.0 - e, hyper) < 0.0]
                if bad:
                    violations.append(f"{phi} ({s21}, {sov}) from eps={min(bad):.1e}, c*={solve_c_star(hyper).c_star:.6f}")
                coef = g_of_c(1.0 - 1e-6, hyper) / math.sqrt(1e-6)
                worst = max(worst, _rel(coef, -math.sqrt(2.0) / math.pi * s21 ** 2))
    ok = not violations and worst <= 0.1
    sign = "g(1 - eps) < 0 everywhere" if not violations else "g(1 - eps) >= 0 at " + "; ".join(violations)
    return ok, f"{sign}; max relative error of leading coefficient {worst:.2%} (<= 10%)"


def _criterion_10():
    parts = []
    ok = True
    for phi in (Nonlinearity.layernorm(), Nonlinearity.erf(1.0)):
        init = CovPair(1.0, 0.2)
        t0 = run_trajectory(init, ModelHyper(0.0, 0.6, 196, phi), 64)
        exact = max(np.max(np.abs(forward_extended(t0).log_j - forward_simplified(t0).log_j)),
                    np.max(np.abs(backward_extended(t0).log_j - backward_simplified(t0).log_j)),
                    np.max(np.abs(forward_extended(t0).k_ratio)), np.max(np.abs(backward_extended(t0).k_ratio)))
        t1 = run_trajectory(init, ModelHyper(0.3, 0.6, 10 ** 6, phi), 64)
        limit = max(np.max(np.abs(np.expm1(forward_extended(t1).log_j - forward_simplified(t1).log_j))),
                    np.max(np.abs(np.expm1(backward_extended(t1).log_j - backward_simplified(t1).log_j))))
        t2 = run_trajectory(init, ModelHyper(1.2, 0.6, 196, phi), 64)
        kf = forward_extended(t2).block_k_ratio[1:]
        kb = backward_extended(t2).block_k_ratio[:-1]
        mono = bool(np.all(np.diff(kf) > 0) and np.all(np.diff(kb) < 0))
        ok &= exact <= 1e-12 and limit <= 1e-3 and mono
        parts.append(f"{phi}: sigma_OV=0 diff {exact:.1e}, n=1e6 rel diff {limit:.1e}, "
                     f"K/J monotone {mono} (forward K/J at B: {kf[-1]:.3f})")
    return ok, "; ".join(parts)


def _criterion_11():
    d, n, B = 256, 32, 8
    tokens = generate_permutation_symmetric(1.0, 0.2, n, d, seed=11).tokens
    est = {}
    for heads, seed in ((1, 110), (4, 111)):
        cfg = TransformerConfig.from_products(SIGMA_21, SIGMA_OV, d=d, n=n, blocks=B, heads=heads, seed=seed)
        est[heads] = backward_apjn_blocks(cfg, tokens, n_probes=10, n_seeds=8)
    worst = 0.0
    for a, b in zip(est[1][:-1], est[4][:-1]):
        worst = max(worst, abs(a.value - b.value) / math.hypot(a.std_error, b.std_error))
    return worst <= 3.0, f"max |J(H=1) - J(H=4)| / combined SE = {worst:.2f} (<= 3)"


def _criterion_12():
    d, n, B, seeds, probes = 256, 32, 8, 8, 10
    tokens = generate_permutation_symmetric(1.0, 0.2, n, d, seed=12).tokens
    parts = []
    worst = 0.0
    for phi in (Nonlinearity.layernorm(), Nonlinearity.erf(1.0)):
        cfg = TransformerConfig.from_products(SIGMA_21, SIGMA_OV, d=d, n=n, blocks=B, norm=phi, final_norm=True,
                                              seed=120)
        nd = n * d
        out_vals = np.zeros((seeds, B))
        pred_vals = np.zeros((seeds, B))
        for i in range(seeds):
            c = cfg.with_seed(weight_seed(cfg, i))
            w = init_weights(c)
            trace = forward(w, tokens, c)
            q_hat = hat_q(covariance_profile(trace)[-1].q_mean, phi)
            rng = rng_for(cfg.seed, "final-norm", i)
            for l_hi, store, factor in ((c.n_layers + 1, out_vals, 1.0), (c.n_layers, pred_vals, q_hat)):
                v = draw_probes(rng, (probes, n, d))
                for layer, g in vjp_sweep(trace, w, v, l_hi, 0):
                    if layer < c.n_layers and layer % 2 == 0:
                        store[i, layer // 2] = factor * np.mean(np.einsum("pij,pij->p", g, g)) / nd
        m_out, m_pred = out_vals.mean(axis=0), pred_vals.mean(axis=0)
        se = np.hypot(out_vals.std(axis=0, ddof=1), pred_vals.std(axis=0, ddof=1)) / math.sqrt(seeds)
        z = np.max(np.abs(m_out - m_pred) / se)
        worst = max(worst, z)
        parts.append(f"{phi}: max z {z:.2f}, mean ratio {np.mean(m_out / m_pred):.4f}")
    return worst <= 3.0, "J^{out,b} vs Q^B J^{B,b}: " + "; ".join(parts) + " (z <= 3)"


CRITERIA = {
    1: ("kernel oracle equivalence", _criterion_1, 10),
    2: ("VJP vs finite differences", _criterion_2, 5),
    3: ("Hutchinson convergence rate", _criterion_3, 30),
    4: ("covariance recurrence vs simulation", _criterion_4, 300),
    5: ("theory vs measured backward APJN (GMFE)", _criterion_5, 900),
    6: ("critical exponent recovery", _criterion_6, 60),
    7: ("subcritical scale recovery", _criterion_7, 120),
    8: ("fixed point and convergence rate", _criterion_8, 60),
    9: ("instability certificate for c* = 1", _criterion_9, 1),
    10: ("extended recurrence limits", _criterion_10, 60),
    11: ("multi-head invariance", _criterion_11, 600),
    12: ("final-normalization factor", _criterion_12, 300),
}


def run_criterion(number):
    title, fn, budget = CRITERIA[number]
    start = time.perf_counter()
    passed, detail = fn()
    return CriterionResult(number, title, bool(passed), detail, time.perf_counter() - start, budget)


def run_criteria(numbers=None, echo=None):
    """Run the selected criteria (all by default); ``echo`` receives each result line."""
    results = []
    for k in sorted(CRITERIA if numbers is None else numbers):
        res = run_criterion(k)
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
