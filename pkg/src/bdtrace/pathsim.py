"""Grid simulation of Feller's Brownian motions by explicit path construction.

The general regime is built in stages: reflecting BM W+, its boundary local
time, an independent subordinator Z, the composition
Y1 = Z(Z^-1(l)) - l + W+, a sojourn time change and killing by local time.
Doob's regime (p2 = 0) is simulated by piecing out killed BM.

Paths use the value CEMETERY (-1.0) for the dead state. Flags per grid point:
FLAG_JUMP on the first point after a boundary jump, FLAG_KILLED on the first
dead point, FLAG_SOJOURN on points held at 0 by a sojourn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._parallel import (STREAM_DOOB, STREAM_KILL, STREAM_PATH, STREAM_SUBORD, path_rng,
                        run_batches)
from .bd_core import AtomicMeasure, BirthDeathMatrix, FellerParams, StateEmbedding
from .errors import BandwidthTooSmall, RegimeMismatch

CEMETERY = -1.0
FLAG_JUMP = 1
FLAG_KILLED = 2
FLAG_SOJOURN = 4

_SQRT_TOL = 1.0 - 1e-12


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    horizon: float = 1.0
    eps: float | None = None
    subordinator_trunc: int = 60
    seed: int = 0
    path_storage: str = "grid"
    threads: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.eps is not None:
            if not self.eps > 0:
                raise ValueError("eps must be positive")
            if self.eps < math.sqrt(self.dt) * _SQRT_TOL:
                raise BandwidthTooSmall(f"eps={self.eps} < sqrt(dt)={math.sqrt(self.dt)}")
        if self.path_storage not in ("grid", "events"):
            raise ValueError("path_storage must be 'grid' or 'events'")
        if self.subordinator_trunc < 1:
            raise ValueError("subordinator_trunc must be at least 1")

    @property
    def bandwidth(self) -> float:
        return math.sqrt(self.dt) if self.eps is None else float(self.eps)

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.horizon / self.dt - 1e-9))


@dataclass
class SamplePath:
    times: np.ndarray
    values: np.ndarray
    flags: np.ndarray
    lifetime: float = math.inf
    killed: bool = False
    aux: dict = field(default_factory=dict)

    @property
    def jump_marks(self) -> np.ndarray:
        return np.flatnonzero(self.flags & FLAG_JUMP)

    @property
    def alive(self) -> np.ndarray:
        return self.values != CEMETERY

    def value_at(self, t) -> np.ndarray:
        """Right-continuous step evaluation at times ``t``."""
        k = np.searchsorted(self.times, np.asarray(t, float), side="right") - 1
        return self.values[np.clip(k, 0, self.values.size - 1)]


@dataclass
class LocalTimeLedger:
    times: np.ndarray
    levels: np.ndarray
    L: np.ndarray  # (n_levels, n_times)
    boundary: np.ndarray

    @property
    def n_levels(self) -> int:
        return self.levels.size


@dataclass(frozen=True)
class SubordinatorPath:
    drift: float
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    bias: float = 0.0

    @property
    def _cum(self) -> np.ndarray:
        return np.concatenate(([0.0], np.cumsum(self.jump_sizes)))

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        n = np.searchsorted(self.jump_times, t, side="right")
        out = self.drift * t + self._cum[n]
        return np.where(np.isinf(t), np.inf, out)

    def inverse(self, s) -> np.ndarray:
        """Right-continuous inverse inf{t : Z(t) > s}."""
        s = np.asarray(s, float)
        cum = self._cum
        tj = self.jump_times
        right = self.drift * tj + cum[1:]
        k = np.searchsorted(right, s, side="right")
        nxt = np.append(tj, np.inf)[k]
        if self.drift > 0:
            # clamp to the preceding jump time against roundoff in s - cum
            prev = np.concatenate(([0.0], tj))[k]
            lin = np.maximum((s - cum[k]) / self.drift, prev)
            return np.minimum(lin, nxt)
        return nxt


def _rng(cfg: SimConfig, stream: int, path_id: int, rng):
    return path_rng(cfg.seed, stream, path_id) if rng is None else rng


def _grid(cfg: SimConfig, horizon: float | None = None) -> np.ndarray:
    T = cfg.horizon if horizon is None else horizon
    n = int(math.ceil(T / cfg.dt - 1e-9))
    return np.arange(n + 1) * cfg.dt


def simulate_reflecting_bm(cfg: SimConfig, x0: float = 0.0, path_id: int = 0, rng=None,
                           horizon: float | None = None) -> SamplePath:
    """|x0 + B| on the grid."""
    if x0 < 0:
        raise ValueError("x0 must be nonnegative")
    rng = _rng(cfg, STREAM_PATH, path_id, rng)
    times = _grid(cfg, horizon)
    inc = rng.standard_normal(times.size - 1) * math.sqrt(cfg.dt)
    vals = np.abs(x0 + np.concatenate(([0.0], np.cumsum(inc))))
    return SamplePath(times, vals, np.zeros(times.size, np.uint8))


def estimate_local_time(path: SamplePath, a: float, cfg: SimConfig,
                        eps: float | None = None) -> np.ndarray:
    """Occupation-band local time at ``a`` accumulated on the path grid.

    Boundary a = 0 uses the one-sided band [0, eps), interior levels the
    symmetric band; both are divided by 2 eps. Left-point rule, so the
    value at index k covers [t_0, t_k).
    """
    if a < 0:
        raise ValueError("level must be nonnegative")
    eps = cfg.bandwidth if eps is None else float(eps)
    if eps < math.sqrt(cfg.dt) * _SQRT_TOL:
        raise BandwidthTooSmall(f"eps={eps} < sqrt(dt)={math.sqrt(cfg.dt)}")
    v = path.values[:-1]
    live = v != CEMETERY
    if a == 0:
        ind = live & (v < eps)
    else:
        ind = live & (np.abs(v - a) < eps)
    inc = np.where(ind, np.diff(path.times), 0.0) / (2.0 * eps)
    return np.concatenate(([0.0], np.cumsum(inc)))


def _kept_atoms(p4: AtomicMeasure, trunc: int):
    loc, w = p4.locations, p4.weights
    bias = math.fsum(loc[trunc:] * w[trunc:]) + p4.tail_bound
    return loc[:trunc], w[:trunc], bias


def simulate_subordinator(p2: float, p4: AtomicMeasure, cfg: SimConfig, path_id: int = 0,
                          rng=None, t_max: float = 1.0,
                          level: float | None = None) -> SubordinatorPath:
    """Drift p2 plus compound-Poisson jumps (size x_j at rate w_j).

    Jumps are generated on [0, t_max] and, if ``level`` is given, further
    until the right value at the last jump exceeds it, so that Z^-1 is
    available on [0, level]. Atoms past ``cfg.subordinator_trunc`` are
    dropped; ``bias`` reports their mass sum x_j w_j.
    """
    if p2 < 0:
        raise ValueError("drift must be nonnegative")
    rng = _rng(cfg, STREAM_SUBORD, path_id, rng)
    loc, w, bias = _kept_atoms(p4, cfg.subordinator_trunc)
    rate = math.fsum(w)
    if rate == 0:
        return SubordinatorPath(float(p2), np.zeros(0), np.zeros(0), bias)
    cdf = np.cumsum(w) / rate
    cdf[-1] = 1.0
    times: list[np.ndarray] = []
    sizes: list[np.ndarray] = []
    t_last, z_last = 0.0, 0.0
    block = max(16, int(rate * t_max * 1.2) + 8)
    while True:
        gaps = rng.exponential(1.0 / rate, block)
        tt = t_last + np.cumsum(gaps)
        ss = loc[np.minimum(np.searchsorted(cdf, rng.random(block), side="right"), loc.size - 1)]
        zz = z_last + p2 * (tt - t_last) + np.cumsum(ss)
        # stop at the first jump that completes both requirements
        ok = tt >= t_max
        if level is not None:
            ok &= zz > level
        hit = np.flatnonzero(ok)
        if hit.size:
            cut = hit[0] + 1
            times.append(tt[:cut])
            sizes.append(ss[:cut])
            break
        times.append(tt)
        sizes.append(ss)
        t_last, z_last = tt[-1], zz[-1]
    return SubordinatorPath(float(p2), np.concatenate(times), np.concatenate(sizes), bias)


def ito_mckean_compose(wplus: SamplePath, ell: np.ndarray, Z: SubordinatorPath) -> SamplePath:
    """Y1 = Z(Z^-1(l)) - l + W+ on the grid of ``wplus``.

    ``aux['ell_y1']`` holds Z^-1(l), the boundary local time of Y1.
    """
    inv = Z.inverse(ell)
    G = Z.value(inv) - ell
    if not np.all(np.isfinite(G)):
        raise RegimeMismatch("subordinator inverse is infinite on the path")
    G = np.maximum(G, 0.0)
    flags = wplus.flags.copy()
    dG = np.diff(G)
    flags[1:][dG > 1e-12] |= FLAG_JUMP
    out = SamplePath(wplus.times, G + wplus.values, flags)
    out.aux["ell_y1"] = inv
    out.aux["ell"] = ell
    return out


def apply_sojourn(y1: SamplePath, ell_y1: np.ndarray, p3: float) -> SamplePath:
    """Time change by f(t) = t + p3 * ell_y1(t).

    Each grid interval [t_k, t_k+1) is stretched by p3 * (increment of
    ell_y1); the added time is spent at 0 at the start of the interval.
    ``aux['source_time']`` holds f^-1 on the new grid and ``aux['dilation']``
    the total inserted time.
    """
    if p3 < 0:
        raise ValueError("p3 must be nonnegative")
    if p3 == 0:
        out = replace(y1, aux=dict(y1.aux))
        out.aux["source_time"] = y1.times.copy()
        out.aux["dilation"] = 0.0
        return out
    t = y1.times
    hold = p3 * np.diff(ell_y1)
    f = t + p3 * (ell_y1 - ell_y1[0])
    dt = float(np.median(np.diff(t)))
    m = int(math.floor(f[-1] / dt + 1e-9))
    new_t = np.arange(m + 1) * dt
    if new_t[-1] < f[-1]:
        new_t = np.append(new_t, f[-1])
    k = np.clip(np.searchsorted(f, new_t, side="right") - 1, 0, t.size - 1)
    off = new_t - f[k]
    h = np.append(hold, 0.0)[k]
    in_hold = off < h
    src = t[k] + np.where(in_hold, 0.0, off - h)
    src = np.minimum(src, t[-1])
    vals = np.where(in_hold, 0.0, y1.values[k])
    flags = np.where(in_hold, FLAG_SOJOURN, 0).astype(np.uint8)
    # keep a jump mark on the first point of the interval carrying it
    first = np.concatenate(([True], k[1:] != k[:-1]))
    flags[first] |= y1.flags[k[first]] & FLAG_JUMP
    out = SamplePath(new_t, vals, flags, aux=dict(y1.aux))
    out.aux["source_time"] = src
    out.aux["dilation"] = p3 * (ell_y1[-1] - ell_y1[0])
    return out


def kill_by_local_time(y2: SamplePath, ell_composed: np.ndarray, p1: float, rng) -> SamplePath:
    """Kill at the first grid time with p1 * ell > E, E ~ Exp(1)."""
    if p1 < 0:
        raise ValueError("p1 must be nonnegative")
    E = rng.exponential()
    if p1 == 0:
        return y2
    idx = np.flatnonzero(p1 * ell_composed > E)
    if idx.size == 0:
        return y2
    k = int(idx[0])
    vals = y2.values.copy()
    flags = y2.flags.copy()
    vals[k:] = CEMETERY
    flags[k] |= FLAG_KILLED
    out = SamplePath(y2.times, vals, flags, lifetime=float(y2.times[k]), killed=True,
                     aux=dict(y2.aux))
    out.aux["kill_threshold"] = E
    return out


def _first_touch(rng, y0: float, n: int, dt: float) -> tuple[np.ndarray, int]:
    """BM from y0 > 0 for n steps; index of the first step ending at 0
    (bridge test included) or -1."""
    path = y0 + math.sqrt(dt) * np.concatenate(([0.0], np.cumsum(rng.standard_normal(n))))
    a, b = path[:-1], path[1:]
    u = rng.random(n)
    with np.errstate(over="ignore", invalid="ignore"):
        p = np.where((a > 0) & (b > 0), np.exp(-2.0 * a * b / dt), 1.0)
    hit = np.flatnonzero(u < p)
    return path, (int(hit[0]) + 1 if hit.size else -1)


def _piece_out_killed(fp: FellerParams, cfg: SimConfig, x0: float, rng,
                      horizon: float) -> SamplePath:
    """Killed BM restarted at each hit of 0 after an Exp hold of mean
    p3 / (p1 + |p4|), jumping per p4 or dying per p1."""
    mass = fp.p4.total_mass
    rate = fp.p1 + mass
    loc = fp.p4.locations
    cdf = np.cumsum(fp.p4.weights) / mass if mass > 0 else np.ones(0)
    mean_hold = fp.p3 / rate if rate > 0 else math.inf
    T: list[np.ndarray] = [np.array([0.0])]
    V: list[np.ndarray] = [np.array([float(x0)])]
    F: list[np.ndarray] = [np.zeros(1, np.uint8)]
    holds: list[float] = []
    t, y = 0.0, float(x0)
    killed = False
    chunk = 4096
    while t < horizon:
        if y > 0:
            n = min(chunk, int(math.ceil((horizon - t) / cfg.dt - 1e-9)))
            if n <= 0:
                break
            path, k = _first_touch(rng, y, n, cfg.dt)
            stop = k if k >= 0 else n
            seg = path[1:stop + 1].copy()
            if k >= 0:
                seg[-1] = 0.0
            T.append(t + cfg.dt * np.arange(1, stop + 1))
            V.append(seg)
            F.append(np.zeros(stop, np.uint8))
            t = float(T[-1][-1])
            y = float(seg[-1])
            continue
        # at 0: hold, then event
        H = rng.exponential(mean_hold) if 0 < mean_hold < math.inf else (0.0 if mean_hold == 0 else math.inf)
        holds.append(H)
        F[-1][-1] |= FLAG_SOJOURN if H > 0 else 0
        if not math.isfinite(H):
            break
        t = t + H
        if rate == 0 or rng.random() < fp.p1 / rate:
            T.append(np.array([t]))
            V.append(np.array([CEMETERY]))
            F.append(np.array([FLAG_KILLED], np.uint8))
            killed = True
            break
        j = min(int(np.searchsorted(cdf, rng.random(), side="right")), loc.size - 1)
        y = float(loc[j])
        if H > 0:
            T.append(np.array([t]))
            V.append(np.array([y]))
            F.append(np.array([FLAG_JUMP], np.uint8))
        else:
            V[-1][-1] = y
            F[-1][-1] |= FLAG_JUMP
    times = np.concatenate(T)
    vals = np.concatenate(V)
    flags = np.concatenate(F)
    out = SamplePath(times, vals, flags, lifetime=float(times[-1]) if killed else math.inf,
                     killed=killed)
    out.aux["holds"] = np.array(holds)
    return out


def simulate_doob_bm(fp: FellerParams, cfg: SimConfig, x0: float = 0.0, path_id: int = 0,
                     rng=None, horizon: float | None = None) -> SamplePath:
    """Reflect-free BM until 0, hold Exp(mean p3/(p1+|p4|)), then jump or die.

    A hold that starts before the horizon is always completed, so holding
    durations can be read off the event times.
    """
    if not (fp.p2 == 0 and fp.p3 > 0 and not fp.p4.truncated):
        raise RegimeMismatch("Doob's regime needs p2 = 0, p3 > 0 and finite p4")
    rng = _rng(cfg, STREAM_DOOB, path_id, rng)
    return _piece_out_killed(fp, cfg, x0, rng, cfg.horizon if horizon is None else horizon)


def ledger_for(path: SamplePath, levels: np.ndarray, cfg: SimConfig,
               boundary: np.ndarray | None = None) -> LocalTimeLedger:
    L = np.array([estimate_local_time(path, float(a), cfg) for a in levels]).reshape(
        len(levels), path.times.size)
    if boundary is None:
        boundary = estimate_local_time(path, 0.0, cfg)
    return LocalTimeLedger(path.times, np.asarray(levels, float), L, boundary)


def default_levels(emb: StateEmbedding, cfg: SimConfig) -> np.ndarray:
    """Embedded levels whose band is resolvable on the grid (c_hat >= eps)."""
    ch = emb.c_hat
    return ch[ch >= cfg.bandwidth]


def simulate_feller_bm(fp: FellerParams, cfg: SimConfig, x0: float = 0.0, path_id: int = 0,
                       emb: StateEmbedding | None = None, levels: np.ndarray | None = None,
                       horizon: float | None = None) -> tuple[SamplePath, LocalTimeLedger]:
    """Feller's BM path on the grid plus its local-time ledger.

    p2 = 0 with finite p4 and p3 > 0, or pure killing, is pieced out from
    killed BM; every other regime goes through the reflecting/subordinator
    composition, the sojourn time change and killing by local time.
    """
    T = cfg.horizon if horizon is None else horizon
    if levels is None:
        levels = default_levels(emb, cfg) if emb is not None else np.zeros(0)
    finite_jumps = not fp.p4.truncated
    if fp.p2 == 0 and (fp.p3 > 0 or fp.p4.total_mass == 0) and finite_jumps:
        rng = path_rng(cfg.seed, STREAM_DOOB, path_id)
        path = _piece_out_killed(fp, cfg, x0, rng, T)
        return path, ledger_for(path, levels, cfg)
    if fp.p2 == 0 and fp.p3 == 0 and finite_jumps:
        raise RegimeMismatch("p2 = p3 = 0 with finite p4 is Doob's BM, not a Feller process")
    wplus = simulate_reflecting_bm(cfg, x0, path_id, horizon=T)
    ell = estimate_local_time(wplus, 0.0, cfg)
    Z = simulate_subordinator(fp.p2, fp.p4, cfg, path_id, t_max=0.0, level=float(ell[-1]))
    y1 = ito_mckean_compose(wplus, ell, Z)
    ell_y1 = y1.aux["ell_y1"]
    y2 = apply_sojourn(y1, ell_y1, fp.p3)
    ell_comp = np.interp(y2.aux["source_time"], y1.times, ell_y1)
    y = kill_by_local_time(y2, ell_comp, fp.p1, path_rng(cfg.seed, STREAM_KILL, path_id))
    y.aux["bias"] = Z.bias
    bnd = np.interp(y.aux["source_time"], wplus.times, ell)
    return y, ledger_for(y, levels, cfg, boundary=bnd)


def snap_distance(values: np.ndarray, c_hat: np.ndarray) -> np.ndarray:
    """Distance from each value to the closure of the embedded levels."""
    v = np.asarray(values, float)
    asc = c_hat[::-1]
    k = np.clip(np.searchsorted(asc, v), 0, asc.size - 1)
    d = np.minimum(np.abs(v - asc[k]), np.abs(v - asc[np.maximum(k - 1, 0)]))
    d = np.minimum(d, np.abs(v))  # 0 is the accumulation point
    return d


@dataclass(frozen=True)
class WrongOrderResult:
    fraction: float
    se: float
    n_paths: int
    correct_fraction: float
    per_path: np.ndarray


def wrong_order_demo(Q: BirthDeathMatrix, fp: FellerParams, cfg: SimConfig,
                     emb: StateEmbedding, mu: np.ndarray, n_paths: int = 100,
                     d_chain: float | None = None) -> WrongOrderResult:
    """Time-change W+ and its local time first, then compose with Z.

    Returns the mean fraction of chain-grid times at which the result is
    farther than eps/2 from the embedded state space, plus the same
    statistic for the correct-order trace of the same configuration.
    """
    from .timechange import accumulate_pcaf, inverse_clock, trace_path

    levels = default_levels(emb, cfg)
    cap = levels.size
    tol = 0.5 * cfg.bandwidth
    fr = np.zeros(n_paths)
    good = np.zeros(n_paths)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            w = simulate_reflecting_bm(cfg, 0.0, p)
            ell = estimate_local_time(w, 0.0, cfg)
            led = ledger_for(w, levels, cfg, boundary=ell)
            clock = accumulate_pcaf(led, mu, cap)
            gam = inverse_clock(clock)
            a_end = float(clock.A[-1])
            step = d_chain if d_chain is not None else cfg.dt
            tc = np.arange(0.0, a_end, step)
            if tc.size == 0:
                continue
            g = gam(tc)
            ok = np.isfinite(g)
            tc, g = tc[ok], g[ok]
            k = np.clip(np.searchsorted(w.times, g, side="right") - 1, 0, w.times.size - 1)
            w_hat = levels[np.abs(w.values[k][:, None] - levels[None, :]).argmin(axis=1)]
            ell_hat = ell[k]
            Z = simulate_subordinator(fp.p2, fp.p4, cfg, p, t_max=0.0, level=float(ell[-1]))
            x_hat = Z.value(Z.inverse(ell_hat)) - ell_hat + w_hat
            fr[p] = float(np.mean(snap_distance(x_hat, emb.c_hat) > tol))
            yp, yl = simulate_feller_bm(fp, cfg, 0.0, p, levels=levels)
            tr = trace_path(yp, accumulate_pcaf(yl, mu, cap), emb)
            vals = emb.c_hat[tr.levels[tr.levels >= 0]]
            good[p] = float(np.mean(snap_distance(vals, emb.c_hat) > tol)) if vals.size else 0.0

    run_batches(work, n_paths, cfg.threads, chunk=8)
    se = float(np.std(fr, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return WrongOrderResult(float(np.mean(fr)), se, n_paths, float(np.max(good)), fr)
