"""Experiment orchestration behind the command-line interface.

Configs are flat ``key = value`` text files (``#`` starts a comment); values
given as comma-separated lists become sweep axes. Every run writes a
``manifest.json`` that is ``running`` until all declared files exist.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .apjn import (backward_extended, backward_simplified, curve_rows, final_norm_factor, forward_extended,
                   forward_simplified)
from .asymptotics import asymptotic_curve, asymptotic_law, phase_map_row
from .covariance import ModelHyper, run_trajectory
from .errors import ConfigError, NoInteriorRootError, SigpropError
from .io import (CURVE_COLUMNS, MEASUREMENT_COLUMNS, PHASE_MAP_COLUMNS, TRAJECTORY_COLUMNS, read_tokens_csv,
                 write_csv, write_tokens_csv)
from .kernels import CovPair, Nonlinearity
from .measurement import GAUSSIAN, RADEMACHER, backward_apjn_blocks, covariance_profile, depth_regions, gmfe, weight_seed
from .simulator import SOFTMAX, UNIFORM, TransformerConfig, forward, generate_permutation_symmetric, init_weights, token_statistics

__all__ = [
    "OUT_ENV",
    "MODES",
    "FIGURES",
    "ExperimentConfig",
    "parse_config_text",
    "load_config",
    "default_out_dir",
    "run",
    "emit_figure_data",
]

OUT_ENV = "SIGPROP_OUT"
MODES = ("theory", "asymptotics", "simulate", "compare", "sweep")
FIGURES = ("fig1a", "fig2", "fig4a", "fig4b", "fig6")
NO_ROOT = "no_interior_root"
_LIST_KEYS = ("sigma_21", "sigma_ov", "alpha", "blocks")


def _float_list(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; field names are the config-file keys.

    ``sigma_21``, ``sigma_ov``, ``alpha`` and ``blocks`` are tuples so that
    sweeps and phase maps can span several values; single-point modes take the
    first entry.
    """

    mode: str = "theory"
    norm: str = "layernorm"
    alpha: tuple = (1.0,)
    sigma_21: tuple = (0.61,)
    sigma_ov: tuple = (0.31,)
    blocks: tuple = (12,)
    context_n: float = math.inf
    q0: float = 1.0
    p0: float = 0.2
    extended: bool = False
    swap_coupling: bool = False
    d: int = 256
    n: int = 32
    heads: int = 1
    attention_mode: str = SOFTMAX
    final_norm: bool = False
    full_layernorm: bool = False
    n_probes: int = 10
    n_seeds: int = 8
    probe: str = GAUSSIAN
    tokens: str = ""
    sweep_mode: str = "theory"
    anchor_block: float = math.nan
    figure: str = ""
    seed: int = 0

    # --- parsing -----------------------------------------------------------

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(key, f"unknown key (expected one of {', '.join(sorted(known))})")
            kwargs[key] = _coerce(key, known[key].default, raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in MODES + ("figure",):
            raise ConfigError("mode", f"must be one of {MODES}")
        if self.sweep_mode not in ("theory", "asymptotics", "simulate", "compare"):
            raise ConfigError("sweep_mode", "must be theory, asymptotics, simulate or compare")
        try:
            Nonlinearity(self.norm, self.alpha[0] if self.alpha else 1.0)
        except SigpropError as exc:
            raise ConfigError("norm", str(exc)) from None
        for key in _LIST_KEYS:
            if not getattr(self, key):
                raise ConfigError(key, "needs at least one value")
        if any(a <= 0 for a in self.alpha):
            raise ConfigError("alpha", "must be positive")
        if any(s < 0 for s in self.sigma_21):
            raise ConfigError("sigma_21", "must be non-negative")
        if any(s < 0 for s in self.sigma_ov):
            raise ConfigError("sigma_ov", "must be non-negative")
        if any(b < 1 or b != int(b) for b in self.blocks):
            raise ConfigError("blocks", "must be positive integers")
        if math.isfinite(self.context_n) and (self.context_n < 2 or self.context_n != int(self.context_n)):
            raise ConfigError("context_n", "must be an integer >= 2 or inf")
        if not self.q0 > 0:
            raise ConfigError("q0", "must be positive")
        if not 0 <= self.p0 <= self.q0:
            raise ConfigError("p0", "must satisfy 0 <= p0 <= q0")
        for key in ("d", "n", "heads", "n_probes", "n_seeds"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.n < 2:
            raise ConfigError("n", "needs at least two tokens")
        if self.d % self.heads:
            raise ConfigError("heads", f"must divide d = {self.d}")
        if self.attention_mode not in (SOFTMAX, UNIFORM):
            raise ConfigError("attention_mode", f"must be {SOFTMAX} or {UNIFORM}")
        if self.probe not in (GAUSSIAN, RADEMACHER):
            raise ConfigError("probe", f"must be {GAUSSIAN} or {RADEMACHER}")
        if self.extended and not math.isfinite(self.context_n):
            raise ConfigError("extended", "needs a finite context_n")
        if self.figure and self.figure not in FIGURES:
            raise ConfigError("figure", f"unknown figure {self.figure!r}; expected one of {FIGURES}")
        if self.full_layernorm and self.phi.is_tanh_like:
            raise ConfigError("full_layernorm", "only applies to norm = layernorm")

    # --- derived objects ---------------------------------------------------

    @property
    def phi(self):
        return Nonlinearity(self.norm, self.alpha[0])

    @property
    def initial(self):
        return CovPair(self.q0, self.p0)

    @property
    def n_blocks(self):
        return int(self.blocks[0])

    def hyper(self):
        return ModelHyper(self.sigma_ov[0], self.sigma_21[0], self.context_n, self.phi)

    def sim(self):
        """Simulator config with ``sigma_O sigma_V = sigma_ov`` and ``sigma_2 sigma_1 = sigma_21``."""
        return TransformerConfig.from_products(
            self.sigma_21[0], self.sigma_ov[0], d=self.d, n=self.n, blocks=self.n_blocks, heads=self.heads,
            norm=self.phi, final_norm=self.final_norm, attention_mode=self.attention_mode, seed=self.seed,
            full_layernorm=self.full_layernorm)

    def grid(self):
        """Single-point configs over the Cartesian product of the list-valued keys."""
        for s21, sov, a, b in itertools.product(self.sigma_21, self.sigma_ov, self.alpha, self.blocks):
            yield replace(self, sigma_21=(s21,), sigma_ov=(sov,), alpha=(a,), blocks=(int(b),))

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(x) for x in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(key, default, raw):
    text = str(raw).strip()
    try:
        if isinstance(default, tuple):
            values = _float_list(text)
            return tuple(int(v) if key == "blocks" else v for v in values)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r}") from None


def parse_config_text(text):
    """Parse ``key = value`` lines into a dict (later keys win)."""
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {number}", f"expected key = value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, overrides=(), **forced):
    """Build an ``ExperimentConfig`` from a file, ``key=value`` overrides and forced fields."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    for item in overrides:
        key, sep, value = str(item).partition("=")
        if not sep:
            raise ConfigError(item, "override must look like key=value")
        values[key.strip()] = value.strip()
    for key, value in forced.items():
        if value is not None:
            values[key] = value
    return ExperimentConfig.from_mapping(values)


def default_out_dir():
    return Path(os.environ.get(OUT_ENV, "sigprop_out"))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class _Manifest:
    def __init__(self, out, cfg, command):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.path = self.out / "manifest.json"
        self.data = {"status": "running", "command": command, "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
                     "config": _jsonable(asdict(cfg)), "files": [], "summary": {}}
        self._write()

    def _write(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)

    def finish(self, files, summary):
        rel = sorted(str(Path(f).relative_to(self.out)) for f in files)
        missing = [f for f in rel if not (self.out / f).is_file() or (self.out / f).stat().st_size == 0]
        self.data.update(files=rel, summary=_jsonable(summary), finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
        if missing:
            self.data.update(status="failed", error=f"missing or empty outputs: {missing}")
            self._write()
            raise SigpropError(f"outputs missing or empty: {missing}")
        self.data["status"] = "complete"
        self._write()

    def fail(self, exc):
        self.data.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                         finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
        self._write()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def _tokens(cfg):
    if cfg.tokens:
        try:
            x = read_tokens_csv(cfg.tokens)
        except (OSError, ValueError) as exc:
            raise ConfigError("tokens", str(exc)) from None
        if x.shape != (cfg.n, cfg.d):
            raise ConfigError("tokens", f"matrix has shape {x.shape}, config says n={cfg.n}, d={cfg.d}")
        return x
    return generate_permutation_symmetric(cfg.q0, cfg.p0, cfg.n, cfg.d, seed=cfg.seed).tokens


def _theory(cfg, out):
    traj = run_trajectory(cfg.initial, cfg.hyper(), cfg.n_blocks)
    rows = curve_rows(traj, extended=cfg.extended, swap_coupling=cfg.swap_coupling)
    files = [write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, traj.rows()),
             write_csv(out / "apjn.csv", CURVE_COLUMNS, rows)]
    summary = {"Q_B": traj.Q[-1], "P_B": traj.P[-1], "j_forward_B": rows[-1][1], "j_backward_1": rows[0][2]}
    return files, summary


def _asymptotics(cfg, out):
    alphas = cfg.alpha if cfg.phi.is_tanh_like else cfg.alpha[:1]
    points = list(itertools.product(cfg.sigma_21, cfg.sigma_ov, alphas))
    rows = []
    for s21, sov, a in points:
        hyper = ModelHyper(sov, s21, cfg.context_n, Nonlinearity(cfg.norm, a))
        try:
            rows.append(phase_map_row(hyper))
        except NoInteriorRootError:
            # a single point reports the error; a map records the cell and moves on
            if len(points) == 1:
                raise
            rows.append((s21, sov, a, NO_ROOT, math.nan, math.nan, math.nan, math.nan))
    return [write_csv(out / "phase_map.csv", PHASE_MAP_COLUMNS, rows)], {"points": len(rows)}


def _measure(cfg, tokens, workers):
    sim = cfg.sim()
    est = backward_apjn_blocks(sim, tokens, cfg.n_probes, cfg.n_seeds, through_final=cfg.final_norm,
                               probe=cfg.probe, workers=workers)
    stats = []
    for i in range(cfg.n_seeds):
        c = sim.with_seed(weight_seed(sim, i))
        stats.append(covariance_profile(forward(init_weights(c), tokens, c)))
    cov = np.mean(np.array(stats, dtype=float), axis=0)
    return est, cov


def _simulate(cfg, out, workers=1):
    tokens = _tokens(cfg)
    est, cov = _measure(cfg, tokens, workers)
    rows = [(e.l_lo, e.l_hi, e.value, e.std_error, e.n_probes, e.n_seeds) for e in est]
    cov_rows = [(b, *cov[b]) for b in range(len(cov))]
    files = [write_tokens_csv(out / "tokens.csv", tokens),
             write_csv(out / "measurement.csv", MEASUREMENT_COLUMNS, rows),
             write_csv(out / "covariance.csv", ("block", "q_mean", "p_mean", "q_std", "p_std"), cov_rows)]
    return files, {"j_backward_1": est[1].value if len(est) > 1 else 1.0}


def _compare_point(cfg, tokens, workers=1):
    q0, p0 = token_statistics(tokens)
    hyper = cfg.hyper()
    B = cfg.n_blocks
    traj = run_trajectory(CovPair(q0, p0), hyper, B)
    if cfg.extended:
        fwd, bwd = forward_extended(traj), backward_extended(traj, swap_coupling=cfg.swap_coupling)
    else:
        fwd, bwd = forward_simplified(traj), backward_simplified(traj)
    theory_b = bwd.block_values
    if cfg.final_norm:
        theory_b = theory_b * final_norm_factor(traj.Q[-1], hyper.phi)
    est, _ = _measure(cfg, tokens, workers)
    measured = np.array([e.value for e in est])
    rows = [(b, fwd.block_values[b], theory_b[b], measured[b], est[b].std_error, theory_b[b] / measured[b],
             fwd.block_values[-1] / (fwd.block_values[b] * bwd.block_values[b]))
            for b in range(B + 1)]
    regions = depth_regions(B)
    scores = {k: (gmfe(theory_b[v], measured[v]) if v else math.nan) for k, v in regions.items()}
    return rows, scores, (q0, p0)


_COMPARE_COLUMNS = ("block", "j_theory_forward", "j_theory_backward", "j_measured", "std_error", "fold",
                    "telescoping_check")


def _compare(cfg, out, workers=1):
    tokens = _tokens(cfg)
    rows, scores, (q0, p0) = _compare_point(cfg, tokens, workers)
    regions = depth_regions(cfg.n_blocks)
    files = [write_tokens_csv(out / "tokens.csv", tokens),
             write_csv(out / "compare.csv", _COMPARE_COLUMNS, rows),
             write_csv(out / "gmfe.csv", ("region", "first_block", "last_block", "gmfe"),
                       [(k, v[0] if v else -1, v[-1] if v else -1, scores[k]) for k, v in regions.items()])]
    return files, {"q0": q0, "p0": p0, "gmfe": scores}


_POINT_RUNNERS = {"theory": _theory, "asymptotics": _asymptotics, "simulate": _simulate, "compare": _compare}


def _sweep_point(args):
    cfg, out = args
    out.mkdir(parents=True, exist_ok=True)
    files, summary = _POINT_RUNNERS[cfg.sweep_mode](cfg, out)
    return files, summary


def _sweep(cfg, out, workers=1):
    if cfg.sweep_mode == "asymptotics":
        return _asymptotics(cfg, out)
    points = list(cfg.grid())
    jobs = [(p, out / f"point_{i:04d}") for i, p in enumerate(points)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    files = [f for fs, _ in results for f in fs]
    index_rows = []
    for (p, path), (_, summary) in zip(jobs, results):
        index_rows.append((path.name, p.sigma_21[0], p.sigma_ov[0], p.alpha[0] if p.phi.is_tanh_like else math.nan,
                           p.n_blocks, json.dumps(_jsonable(summary), sort_keys=True)))
    files.append(write_csv(out / "sweep.csv", ("point", "sigma_21", "sigma_ov", "alpha", "blocks", "summary"),
                           index_rows))
    return files, {"points": len(points)}


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def emit_figure_data(which, cfg, out, workers=1):
    """Write the CSV behind one figure recipe and return ``(files, summary)``.

    fig1a
        Backward APJN, theory vs simulator, for pre-LN and Derf at every
        ``alpha`` in the config, with per-region GMFE.
    fig2
        Theory backward APJN with the asymptotic law anchored at ``anchor_block``
        (default ``B/2``) for the configured norm.
    fig4a, fig4b
        ``1/lambda`` (tanh-like) and ``zeta`` (LayerNorm) over the
        ``sigma_21 x sigma_ov`` grid.
    fig6
        ``K/J`` ratios of the extended recurrences per block for every
        ``(sigma_21, sigma_ov)`` pair.
    """
    out = Path(out)
    if which == "fig1a":
        rows, gm = [], []
        variants = [("layernorm", 1.0)] + [("erf", a) for a in cfg.alpha]
        tokens = _tokens(cfg)
        for kind, a in variants:
            point = replace(cfg, norm=kind, alpha=(a,))
            crows, scores, _ = _compare_point(point, tokens, workers)
            label = str(point.phi)
            rows += [(label, b, r[2], r[3], r[4]) for b, r in enumerate(crows)]
            gm += [(label, k, v) for k, v in scores.items()]
        files = [write_csv(out / "fig1a.csv", ("variant", "block", "j_theory", "j_measured", "std_error"), rows),
                 write_csv(out / "fig1a_gmfe.csv", ("variant", "region", "gmfe"), gm)]
        return files, {"gmfe": {f"{v}/{r}": g for v, r, g in gm}}
    if which == "fig2":
        B = cfg.n_blocks
        traj = run_trajectory(cfg.initial, cfg.hyper(), B)
        bwd = backward_simplified(traj).block_values
        fwd = forward_simplified(traj).block_values
        law = asymptotic_law(cfg.hyper())
        ref = cfg.anchor_block if math.isfinite(cfg.anchor_block) else max(1, B // 2)
        ref = int(min(max(ref, 1), B))
        b = np.arange(1, B + 1)
        asym_b = asymptotic_curve(law, b, B, "backward", anchor=(ref, bwd[ref]))
        asym_f = asymptotic_curve(law, b, direction="forward", anchor=(ref, fwd[ref]))
        rows = [(int(k), fwd[k], asym_f[i], bwd[k], asym_b[i]) for i, k in enumerate(b)]
        files = [write_csv(out / "fig2.csv", ("block", "j_forward", "j_forward_asymptotic", "j_backward",
                                               "j_backward_asymptotic"), rows)]
        return files, {"regime": law.regime, "zeta": law.zeta, "lambda_inv": law.lambda_inv}
    if which in ("fig4a", "fig4b"):
        rows = []
        for s21, sov in itertools.product(cfg.sigma_21, cfg.sigma_ov):
            if which == "fig4b":
                law = asymptotic_law(ModelHyper(sov, s21, phi=Nonlinearity.layernorm()))
                rows.append((s21, sov, law.zeta))
            else:
                for a in cfg.alpha:
                    kind = cfg.norm if Nonlinearity(cfg.norm, a).is_tanh_like else "erf"
                    law = asymptotic_law(ModelHyper(sov, s21, phi=Nonlinearity(kind, a)))
                    rows.append((s21, sov, a, law.lambda_inv))
        header = ("sigma_21", "sigma_ov", "zeta") if which == "fig4b" else ("sigma_21", "sigma_ov", "alpha",
                                                                            "lambda_inv")
        return [write_csv(out / f"{which}.csv", header, rows)], {"points": len(rows)}
    if which == "fig6":
        n = cfg.context_n if math.isfinite(cfg.context_n) else 196
        rows = []
        for s21, sov in itertools.product(cfg.sigma_21, cfg.sigma_ov):
            traj = run_trajectory(cfg.initial, ModelHyper(sov, s21, n, cfg.phi), cfg.n_blocks)
            kf = forward_extended(traj).block_k_ratio
            kb = backward_extended(traj, swap_coupling=cfg.swap_coupling).block_k_ratio
            rows += [(s21, sov, b, kf[b], kb[b]) for b in range(cfg.n_blocks + 1)]
        return [write_csv(out / "fig6.csv", ("sigma_21", "sigma_ov", "block", "k_over_j_forward",
                                             "k_over_j_backward"), rows)], {"points": len(rows)}
    raise ConfigError("figure", f"unknown figure {which!r}; expected one of {FIGURES}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run(cfg, out=None, workers=1, command=None):
    """Run ``cfg.mode`` into ``out`` and return the manifest dict.

    Raises whatever the run raised after marking the manifest ``failed``.
    """
    out = default_out_dir() if out is None else Path(out)
    manifest = _Manifest(out, cfg, command or cfg.mode)
    try:
        if cfg.mode == "figure":
            files, summary = emit_figure_data(cfg.figure, cfg, out, workers)
        elif cfg.mode == "sweep":
            files, summary = _sweep(cfg, out, workers)
        elif cfg.mode in ("simulate", "compare"):
            files, summary = _POINT_RUNNERS[cfg.mode](cfg, out, workers)
        else:
            files, summary = _POINT_RUNNERS[cfg.mode](cfg, out)
        (out / "config.txt").write_text(cfg.to_text())
        manifest.finish(list(files) + [out / "config.txt"], summary)
    except BaseException as exc:
        if manifest.data["status"] != "failed":
            manifest.fail(exc)
        raise
    return manifest.data
