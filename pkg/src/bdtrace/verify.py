"""Monte Carlo harness: hitting laws and the chain-vs-Brownian cross-validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _engine
from ._parallel import STREAM_HIT, STREAM_LAPLACE, path_rng, run_batches
from ._stats import ResolventEstimate, mc_stats
from .bd_core import (BirthDeathMatrix, ChainParams, FellerParams, StateEmbedding,
                      chain_from_feller, compute_scale_speed, state_embedding)
from .bd_core import AtomicMeasure
from .pathsim import SimConfig, simulate_doob_bm, simulate_subordinator
from .resolvent import phi_minimal, psi_chain
from .timechange import level_cap_for, mc_trace_resolvent

__all__ = ["ResolventEstimate", "mc_stats", "HittingEstimate", "hitting_probabilities",
           "hitting_distribution_mc", "CrossValidationReport", "cross_validate",
           "analytic_psi", "Z_PASS", "ADVISORY_REL", "REPORT_FIELDS", "LawCheck",
           "killed_laplace_mc", "subordinator_laplace_mc", "doob_holding_mc"]

Z_PASS = 3.0
ADVISORY_REL = 0.05
PSI_TRUNCATION = 200
REPORT_FIELDS = ("case", "alpha", "i", "j", "analytic", "mc", "se", "z", "pass")


# ------------------------------------------------------------ hitting laws

@dataclass(frozen=True)
class HittingEstimate:
    start: float
    levels: np.ndarray
    freq: np.ndarray
    se: np.ndarray
    cemetery: float
    n_paths: int
    censored: int = 0

    def z_scores(self, expected: np.ndarray) -> np.ndarray:
        d = self.freq - expected
        s = np.maximum(self.se, 1.0 / self.n_paths)
        return np.where(d == 0, 0.0, d / s)


def hitting_probabilities(x: float, emb: StateEmbedding, n_levels: int) -> np.ndarray:
    """Piecewise-linear law of the first embedded level reached from x > 0.

    Above c_hat[0] the level 0 is reached with probability 1.
    """
    ch = emb.c_hat[:n_levels]
    out = np.zeros(n_levels)
    if x >= ch[0]:
        out[0] = 1.0
        return out
    n = int(np.flatnonzero(ch >= x)[-1])
    if ch[n] == x or n + 1 >= n_levels:
        out[n] = 1.0
        return out
    w = (x - ch[n + 1]) / (ch[n] - ch[n + 1])
    out[n] = w
    out[n + 1] = 1.0 - w
    return out


def hitting_distribution_mc(fp: FellerParams, start: float, emb: StateEmbedding, n_paths: int,
                            cfg: SimConfig, n_levels: int | None = None,
                            max_steps: int = 10**9) -> HittingEstimate:
    """Frequencies of the first embedded level visited from ``start``."""
    if not start > 0:
        raise ValueError("start must be positive")
    L = emb.n_levels if n_levels is None else int(n_levels)
    levels = np.ascontiguousarray(emb.c_hat[:L], float)
    dt = cfg.dt
    reg = _engine.regime_from_feller(fp)
    out = np.empty(n_paths, np.int64)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            rng = path_rng(cfg.seed, STREAM_HIT, p)
            out[p] = _engine.first_visit_path(rng, float(start), levels, dt, max_steps,
                                              *reg.args())

    run_batches(work, n_paths, cfg.threads)
    ok = out >= -1
    N = int(np.sum(ok))
    f = np.bincount(out[ok & (out >= 0)], minlength=L)[:L] / N
    se = np.sqrt(f * (1 - f) / N)
    return HittingEstimate(float(start), levels, f, se, float(np.sum(out == -1)) / N, N,
                           int(n_paths - N))


# ------------------------------------------------------------ pathwise laws

@dataclass(frozen=True)
class LawCheck:
    """MC mean against an exact value."""

    name: str
    mc: float
    se: float
    exact: float

    @property
    def z(self) -> float:
        return (self.mc - self.exact) / self.se if self.se > 0 else math.inf

    @property
    def passed(self) -> bool:
        return abs(self.z) < Z_PASS


def killed_laplace_mc(x0: float, alpha: float, n_paths: int, cfg: SimConfig,
                      horizon: float | None = None) -> LawCheck:
    """E_x exp(-alpha tau_0) for BM against exp(-x sqrt(2 alpha)).

    Paths still alive at ``horizon`` contribute 0; the default horizon makes
    that bias below 1e-7.
    """
    H = 16.0 / alpha if horizon is None else horizon
    steps = int(math.ceil(H / cfg.dt))
    out = np.empty(n_paths)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            rng = path_rng(cfg.seed, STREAM_LAPLACE, p)
            out[p] = _engine.killed_laplace_path(rng, float(x0), float(alpha), cfg.dt, steps)

    run_batches(work, n_paths, cfg.threads)
    m, se, _ = mc_stats(out)
    return LawCheck(f"laplace tau_0 x={x0} alpha={alpha}", m, se,
                    math.exp(-x0 * math.sqrt(2 * alpha)))


def subordinator_laplace_mc(p2: float, p4: AtomicMeasure, s: float, t: float, n_paths: int,
                            cfg: SimConfig) -> LawCheck:
    """E exp(-s Z_t) against exp(-t (p2 s + sum_j w_j (1 - e^{-s x_j})))."""
    vals = np.empty(n_paths)
    for p in range(n_paths):
        Z = simulate_subordinator(p2, p4, cfg, p, t_max=t)
        vals[p] = math.exp(-s * float(Z.value(t)))
    m, se, _ = mc_stats(vals)
    exact = math.exp(-t * (p2 * s + math.fsum(p4.weights * -np.expm1(-s * p4.locations))))
    return LawCheck(f"subordinator s={s} t={t}", m, se, exact)


def doob_holding_mc(fp: FellerParams, n_paths: int, cfg: SimConfig) -> LawCheck:
    """Mean first holding time at 0 against p3 / (p1 + |p4|)."""
    vals = np.empty(n_paths)
    for p in range(n_paths):
        path = simulate_doob_bm(fp, cfg, 0.0, p, horizon=1e-300)
        vals[p] = path.aux["holds"][0]
    m, se, _ = mc_stats(vals)
    return LawCheck("doob holding mean", m, se, fp.p3 / (fp.p1 + fp.p4.total_mass))


# --------------------------------------------------------- cross-validation

def analytic_psi(Q: BirthDeathMatrix, cp: ChainParams, alphas, ss=None,
                 N: int = PSI_TRUNCATION) -> np.ndarray:
    """Psi(alpha) for each alpha, shape (len(alphas), N, N)."""
    ss = compute_scale_speed(Q) if ss is None else ss
    return np.array([psi_chain(phi_minimal(Q, ss, float(a), N), ss, cp) for a in alphas])


@dataclass
class CrossValidationReport:
    rows: list = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.rows)

    @property
    def max_abs_z(self) -> float:
        return max((abs(r["z"]) for r in self.rows), default=0.0)


def cross_validate(Q: BirthDeathMatrix, fp: FellerParams, alpha_list, ij_list, n_paths: int,
                   cfg: SimConfig, *, case: str = "", chain: ChainParams | None = None,
                   beta_factor: float | None = None, N: int = PSI_TRUNCATION,
                   d_chain: float = 0.005) -> CrossValidationReport:
    """Compare the MC trace resolvent of ``fp`` with Psi of the mapped chain.

    ``chain`` replaces the mapped parameters outright; ``beta_factor``
    rescales beta relative to p2 (the parameter map uses 2). Either turns the run
    into a negative control.
    """
    ss = compute_scale_speed(Q)
    emb = state_embedding(ss)
    cp = chain_from_feller(fp, emb) if chain is None else chain
    if beta_factor is not None:
        cp = replace(cp, beta=beta_factor * fp.p2)
    alphas = [float(a) for a in alpha_list]
    psi = analytic_psi(Q, cp, alphas, ss, N)
    by_start: dict = {}
    for i, j in ij_list:
        by_start.setdefault(int(i), []).append(int(j))
    cap = level_cap_for(ss)
    report = CrossValidationReport(fingerprint={
        "case": case, "seed": cfg.seed, "dt": cfg.dt, "eps": cfg.bandwidth, "n_paths": n_paths,
        "level_cap": cap, "psi_truncation": N, "d_chain": d_chain,
        "chain": {"gamma": cp.gamma, "beta": cp.beta, "nu": cp.nu.tolist()}})
    for i in sorted(by_start):
        js = sorted(set(by_start[i]))
        est = mc_trace_resolvent(fp, Q, alphas, i, js, n_paths, cfg, d_chain=d_chain, ss=ss,
                                 level_cap=cap)
        for a_idx, a in enumerate(alphas):
            for j_idx, j in enumerate(js):
                an = float(psi[a_idx, i, j])
                mc = float(est.value[a_idx, j_idx])
                se = float(est.se[a_idx, j_idx])
                z = (mc - an) / se if se > 0 else (0.0 if mc == an else math.inf)
                rel = abs(mc - an) / abs(an) if an else math.inf
                report.rows.append({
                    "case": case, "alpha": a, "i": i, "j": j, "analytic": an, "mc": mc,
                    "se": se, "z": z, "pass": bool(abs(z) < Z_PASS),
                    "advisory": bool(rel < ADVISORY_REL)})
    return report
