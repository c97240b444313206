"""The clock A = sum_n mu_n L^{c_n}, its inverse and the trace chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from ._parallel import STREAM_TRACE, path_rng, run_batches
from ._stats import ResolventEstimate, mc_stats
from .bd_core import (BirthDeathMatrix, FellerParams, ScaleSpeed, StateEmbedding,
                      compute_scale_speed, state_embedding)
from .errors import LevelMismatch, RegimeMismatch, SnapFailure
from .pathsim import CEMETERY, FLAG_JUMP, LocalTimeLedger, SamplePath, SimConfig

MU_TAIL = 1e-9
HORIZON_TAIL = 1e-4


@dataclass(frozen=True)
class ClockPath:
    times: np.ndarray
    A: np.ndarray
    levels: np.ndarray
    tail_bound: float = 0.0

    @property
    def flat(self) -> np.ndarray:
        """Indices of grid intervals on which A does not grow."""
        return np.flatnonzero(np.diff(self.A) <= 0)


@dataclass(frozen=True)
class InverseClock:
    clock: ClockPath

    def __call__(self, t):
        """gamma_t = inf{s : A_s > t}; +inf once t >= A at the end of the path."""
        A, s = self.clock.A, self.clock.times
        t = np.asarray(t, float)
        k = np.searchsorted(A, t, side="right")
        out = np.full(t.shape, np.inf)
        ok = (k < A.size) & (k > 0)
        kk = k[ok]
        a0, a1 = A[kk - 1], A[kk]
        out[ok] = s[kk - 1] + (t[ok] - a0) / (a1 - a0) * (s[kk] - s[kk - 1])
        # t below A_0 = 0 cannot occur for t >= 0; keep the convention anyway
        out[(k == 0)] = s[0]
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class TraceChainPath:
    chain_times: np.ndarray
    levels: np.ndarray  # -1 encodes the cemetery
    lifetime: float
    horizon: float
    boundary_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def level_at(self, t) -> np.ndarray:
        k = np.searchsorted(self.chain_times, np.asarray(t, float), side="right") - 1
        return np.where(k >= 0, self.levels[np.maximum(k, 0)], -2)


def level_cap_for(ss: ScaleSpeed, tail: float = MU_TAIL) -> int:
    """Smallest cap whose speed-measure tail sum_{n >= cap} mu_n is below ``tail``.

    The tail beyond the computed range is bounded by the last computed term
    times the geometric factor of the final ratios when available.
    """
    mu = ss.mu
    r = mu[-1] / mu[-2] if mu.size > 1 and mu[-2] > 0 else 0.0
    beyond = mu[-1] * r / (1 - r) if r < 1 else math.inf
    tails = np.cumsum(mu[::-1])[::-1] + beyond
    ok = np.flatnonzero(tails < tail)
    if ok.size == 0:
        raise LevelMismatch("speed-measure tail does not fall below the target")
    return int(ok[0])


def accumulate_pcaf(ledger: LocalTimeLedger, mu: np.ndarray, level_cap: int,
                    emb: StateEmbedding | None = None) -> ClockPath:
    """A_t = sum_{n < cap} mu_n L^{c_n}_t from a ledger."""
    if ledger.n_levels < level_cap or len(mu) < level_cap:
        raise LevelMismatch(f"ledger has {ledger.n_levels} levels, cap {level_cap}")
    if emb is not None and not np.array_equal(ledger.levels[:level_cap], emb.c_hat[:level_cap]):
        raise LevelMismatch("ledger levels differ from the embedding")
    m = np.asarray(mu[:level_cap], float)
    # summing increments keeps dA exactly 0 on steps with no band time
    inc = m @ np.diff(ledger.L[:level_cap], axis=1) if level_cap else np.zeros(ledger.times.size - 1)
    A = np.concatenate(([0.0], np.cumsum(np.maximum(inc, 0.0))))
    proxy = float(np.max(ledger.L[:, -1])) if ledger.n_levels else 0.0
    proxy = max(proxy, float(ledger.boundary[-1]))
    tail = float(np.sum(mu[level_cap:])) * proxy
    return ClockPath(ledger.times, A, ledger.levels[:level_cap], tail)


def inverse_clock(clock: ClockPath) -> InverseClock:
    return InverseClock(clock)


def trace_path(path: SamplePath, clock: ClockPath, emb: StateEmbedding,
               eps: float | None = None) -> TraceChainPath:
    """Events (chain time, level) of the trace of ``path`` under ``clock``.

    A grid interval with dA > 0 contributes the level nearest to its left
    value; consecutive equal levels are merged. Killing appends -1 at
    A_{zeta-}.
    """
    levels = clock.levels
    if levels.size == 0:
        raise LevelMismatch("clock has no levels")
    if eps is None:
        eps = float(np.sqrt(np.median(np.diff(path.times))))
    A = clock.A
    dA = np.diff(A)
    act = np.flatnonzero(dA > 0)
    v = path.values[act]
    asc = levels[::-1]
    k = np.clip(np.searchsorted(asc, v), 0, asc.size - 1)
    lo = np.maximum(k - 1, 0)
    pick = np.where(np.abs(v - asc[k]) <= np.abs(v - asc[lo]), k, lo)
    dist = np.abs(v - asc[pick])
    if np.any((dist >= eps) & (v >= eps)):
        raise SnapFailure("trace value outside every band; dt/eps too coarse")
    lev = levels.size - 1 - pick
    keep = np.concatenate(([True], lev[1:] != lev[:-1])) if lev.size else np.zeros(0, bool)
    ct = A[act][keep]
    lv = lev[keep].astype(np.int64)
    lifetime = math.inf
    if path.killed:
        kz = int(np.searchsorted(path.times, path.lifetime))
        lifetime = float(A[kz])
        ct = np.append(ct, lifetime)
        lv = np.append(lv, -1)
    vals = path.values
    touch = (vals >= 0) & (vals < eps)
    touch[path.flags & FLAG_JUMP > 0] = True
    bt = np.unique(A[touch & (vals != CEMETERY)])
    return TraceChainPath(ct, lv, lifetime, float(A[-1]), bt)


def _tables(emb: StateEmbedding, ss: ScaleSpeed, cap: int, eps: float, mirror: float,
            targets: np.ndarray, alphas: np.ndarray, dt: float):
    ch = emb.c_hat[:cap].copy()
    mu = ss.mu[:cap].copy()
    bp, val = _engine.band_table(ch, mu, eps, mirror)
    tw = _engine.target_table(bp, ch, targets, eps, mirror)
    H = _engine.half_step_factors(val, alphas, dt)
    return ch, mu, bp, val, tw, H


def mc_trace_resolvent(fp: FellerParams, Q: BirthDeathMatrix, alpha, i: int, j, n_paths: int,
                       cfg: SimConfig, *, d_chain: float = 0.005,
                       max_steps: int = 10**9, ss: ScaleSpeed | None = None,
                       level_cap: int | None = None) -> ResolventEstimate:
    """MC estimate of the trace resolvent Psi_ij(alpha) from paths started at c_hat[i].

    Primary: mu_j int e^{-alpha A_t} dL^{c_j}_t along each path, with band
    clocks of half-width eps and 2 eps combined as 2 X_eps - X_2eps to cancel
    the O(eps) band bias (the eps value alone is kept in ``single``).
    Secondary: int e^{-alpha t} 1{trace_t = j} dt by a chain-time Riemann sum
    with step ``d_chain`` on the eps clock. Paths run until A exceeds the horizon
    log(1 / HORIZON_TAIL) / min(alpha). ``alpha`` and ``j`` may be scalars
    or sequences; values have shape (len(alpha), len(j)).
    """
    alphas = np.atleast_1d(np.asarray(alpha, float))
    targets = np.atleast_1d(np.asarray(j, np.int64))
    ss = compute_scale_speed(Q) if ss is None else ss
    if not ss.regular:
        raise RegimeMismatch("trace simulation needs a regular boundary at infinity")
    emb = state_embedding(ss)
    cap = level_cap_for(ss) if level_cap is None else int(level_cap)
    if max(i, int(targets.max())) >= cap:
        raise LevelMismatch("start or target beyond the level cap")
    eps = cfg.bandwidth
    mirror = 1.0 if fp.p2 > 0 else -1.0
    # the barrier sits 2 eps above the widest band
    upper = float(emb.c_hat[0] + 4 * eps)
    reg = _engine.regime_from_feller(fp, upper)
    ch, mu, bp, val, tw, H = _tables(emb, ss, cap, eps, mirror, targets, alphas, cfg.dt)
    _, _, bp2, val2, tw2, H2 = _tables(emb, ss, cap, 2 * eps, mirror, targets, alphas, cfg.dt)
    cell, inv_h = _engine.cell_index(bp, upper, eps / 8.0)
    cell2, inv_h2 = _engine.cell_index(bp2, upper, eps / 4.0)
    t_chain = math.log(1.0 / HORIZON_TAIL) / float(alphas.min())
    mu_t = mu[targets]
    prim = np.zeros((n_paths, alphas.size, targets.size))
    single = np.zeros_like(prim)
    sec = np.zeros_like(prim)
    status = np.zeros(n_paths, np.int64)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            rng = path_rng(cfg.seed, STREAM_TRACE, i, p)
            a1, a2, b, st, _, _ = _engine.trace_resolvent_path(
                rng, float(ch[i]), cfg.dt, max_steps, *reg.args(), bp, cell, inv_h, val, tw, H,
                bp2, cell2, inv_h2, val2, tw2, H2, mu_t, targets, alphas, t_chain, d_chain, ch, mu,
                eps)
            prim[p] = 2.0 * a1 - a2
            single[p] = a1
            sec[p] = b
            status[p] = st

    run_batches(work, n_paths, cfg.threads)
    m1, s1, _ = mc_stats(prim)
    m2, s2, _ = mc_stats(sec)
    m3, s3, _ = mc_stats(single)
    fp_ = {"seed": cfg.seed, "dt": cfg.dt, "eps": eps, "bands": [eps, 2 * eps], "level_cap": cap,
           "n_paths": n_paths, "d_chain": d_chain, "t_chain": t_chain, "start": int(i),
           "feller": [fp.p1, fp.p2, fp.p3, fp.p4.total_mass]}
    counts = {k: int(v) for k, v in zip(("horizon", "killed", "budget"),
                                         np.bincount(status, minlength=3))}
    return ResolventEstimate(np.asarray(m1), np.asarray(s1), n_paths, fp_, alphas, targets,
                             np.asarray(m2), np.asarray(s2), counts, np.asarray(m3),
                             np.asarray(s3))
