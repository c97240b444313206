"""Excursion surgery, Doob approximants and the reconstruction of lambda.

The approximant at level n discards every stretch of the path between a
boundary approach and the next visit to [c_hat[n], inf). Its instantaneous
distribution lambda^(n) is the law of that re-entry point, and the family
(lambda^(n)) determines the boundary parameters up to a constant.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from . import _engine
from ._parallel import STREAM_INSTANT, STREAM_RHO, STREAM_VISIT, path_rng, run_batches
from .bd_core import AtomicMeasure, FellerParams, StateEmbedding
from .errors import (DimensionMismatch, InconsistentEstimates, LevelMismatch,
                     ScheduleOrderViolation)
from .pathsim import CEMETERY, FLAG_JUMP, SamplePath, SimConfig, simulate_feller_bm
from .timechange import TraceChainPath

INCONSISTENT_SE = 5.0
LEVEL_STEPS = 40.0


# ------------------------------------------------------------------ surgery

@dataclass(frozen=True)
class SurgerySchedule:
    """Discard intervals [alpha_m, beta_m); beta may be +inf for the last one."""

    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    level: int | None = None
    provenance: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.alpha, float).reshape(-1)
        b = np.asarray(self.beta, float).reshape(-1)
        if a.size != b.size:
            raise ScheduleOrderViolation("alpha and beta differ in length")
        if a.size:
            if a[0] < 0 or np.any(b < a):
                raise ScheduleOrderViolation("need 0 <= alpha_m <= beta_m")
            if np.any(a[1:] <= b[:-1]):
                raise ScheduleOrderViolation("need beta_m < alpha_{m+1}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def __len__(self) -> int:
        return self.alpha.size

    def discarded(self, end: float) -> float:
        """Total length of [alpha_m, beta_m) inside [0, end]."""
        return math.fsum(np.minimum(self.beta, end) - np.minimum(self.alpha, end))


def _grid_eps(path: SamplePath, eps: float | None) -> float:
    if eps is not None:
        return float(eps)
    d = np.diff(path.times)
    return float(np.sqrt(np.median(d))) if d.size else 0.0


def excursion_times(path: SamplePath, emb: StateEmbedding, n: int,
                    eps: float | None = None) -> SurgerySchedule:
    """eta_m (boundary approach) and sigma_m (next value >= c_hat[n]).

    A boundary approach is a grid value in [0, eps) or a jump mark (the
    left limit of a jump from the boundary is 0). Death counts as sigma.
    The schedule is empty if the path never approaches 0.
    """
    eps = _grid_eps(path, eps)
    c = float(emb.c_hat[n])
    if c <= eps:
        raise LevelMismatch(f"level {n} (c_hat = {c:.3g}) is inside the boundary band")
    v, t = path.values, path.times
    dead = v == CEMETERY
    touch = np.flatnonzero(((v >= 0) & (v < eps) | (path.flags & FLAG_JUMP > 0)) & ~dead)
    up = np.flatnonzero((v >= c) | dead)
    a, b, prov = [], [], []
    k = 0
    while True:
        q = np.searchsorted(touch, k)
        if q >= touch.size:
            break
        i0 = touch[q]
        r = np.searchsorted(up, i0)
        a.append(t[i0])
        m = len(a)
        if r >= up.size:
            b.append(math.inf)
            prov.append((f"eta{m}", f"sigma{m}=inf"))
            break
        j = up[r]
        b.append(t[j])
        prov.append((f"eta{m}", f"sigma{m}"))
        if dead[j]:
            break
        k = j + 1
    return SurgerySchedule(np.array(a), np.array(b), n, tuple(prov))


def c_transform(path: SamplePath, schedule: SurgerySchedule) -> tuple[SamplePath, float]:
    """Cut [alpha_m, beta_m) out of ``path`` and close the gaps.

    Returns the spliced path and the discarded duration; the spliced path
    ends at (input end - discarded).
    """
    t = path.times
    end = float(t[-1])
    if len(schedule) == 0:
        out = replace(path, aux=dict(path.aux, source_time=t.copy(), discarded=0.0))
        return out, 0.0
    a, b = schedule.alpha, schedule.beta
    # m such that alpha_m <= t: inside a cut iff t < beta_m
    m = np.searchsorted(a, t, side="right") - 1
    inside = (m >= 0) & (t < b[np.maximum(m, 0)])
    keep = ~inside
    lens = np.minimum(b, end) - a
    cum = np.concatenate(([0.0], np.cumsum(lens)))
    # cuts fully before t are those with beta_m <= t
    nb = np.searchsorted(b, t, side="right")
    shift = cum[nb]
    tk = t[keep]
    new_t = tk - shift[keep]
    vals = path.values[keep]
    flags = path.flags[keep].copy()
    src = np.flatnonzero(keep)
    gap = np.concatenate(([False], np.diff(src) > 1))
    flags[gap & (vals != CEMETERY)] |= FLAG_JUMP
    disc = schedule.discarded(end)
    out_end = end - disc
    if new_t.size == 0 or new_t[-1] < out_end:
        # the final cut runs to the end; the spliced path stops where it began
        new_t = np.append(new_t, out_end)
        vals = np.append(vals, vals[-1] if vals.size else CEMETERY)
        flags = np.append(flags, 0)
        tk = np.append(tk, end)
    dead = np.flatnonzero(vals == CEMETERY)
    killed = dead.size > 0
    life = float(new_t[dead[0]]) if killed else math.inf
    out = SamplePath(new_t, vals, flags, life, killed,
                     dict(source_time=tk, discarded=disc, schedule=schedule))
    return out, disc


# ---------------------------------------------------- instantaneous distributions

@dataclass(frozen=True)
class RegimeNote:
    """Returned instead of an estimate when the regime has no such object."""

    message: str


@dataclass(frozen=True)
class InstantDistEstimate:
    """Frequencies of the re-entry point on [c_hat[n], inf) and on the cemetery."""

    n: int
    level: float
    locations: np.ndarray
    freq: np.ndarray
    se: np.ndarray
    cemetery: float
    cemetery_se: float
    n_paths: int
    censored: int = 0

    def mass(self, x: float) -> float:
        k = np.flatnonzero(self.locations == x)
        return float(self.freq[k[0]]) if k.size else 0.0

    @property
    def total(self) -> float:
        return math.fsum(self.freq) + self.cemetery

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell probabilities with the cemetery last."""
        return self.locations, np.append(self.freq, self.cemetery)


def _bernoulli_se(p: np.ndarray, n: int) -> np.ndarray:
    return np.sqrt(np.clip(p * (1 - p), 0, None) / n)


def level_dt(dt: float, c: float) -> float:
    """Time step resolving a level at height c (at most (c / 40)^2)."""
    return min(dt, (c / LEVEL_STEPS) ** 2)


def _from_samples(n: int, level: float, out: np.ndarray) -> InstantDistEstimate:
    ok = ~np.isnan(out)
    cens = int(np.sum(~ok))
    out = out[ok]
    N = out.size
    dead = out == _engine.KILLED
    locs, counts = np.unique(out[~dead], return_counts=True)
    locs, counts = locs[::-1], counts[::-1]
    f = counts / N
    pc = float(np.sum(dead)) / N
    return InstantDistEstimate(n, level, locs, f, _bernoulli_se(f, N), pc,
                               float(_bernoulli_se(np.array(pc), N)), N, cens)


def estimate_instant_dist(fp: FellerParams, n: int, n_paths: int, cfg: SimConfig,
                          emb: StateEmbedding, max_steps: int = 10**9):
    """MC law of Y at sigma^(n), the first time >= c_hat[n], from Y_0 = 0."""
    if fp.is_minimal:
        return RegimeNote("the process never leaves 0 after its first approach (tau_0 = zeta)")
    level = float(emb.c_hat[n])
    reg = _engine.regime_from_feller(fp)
    dt = level_dt(cfg.dt, level)
    out = np.empty(n_paths)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            rng = path_rng(cfg.seed, STREAM_INSTANT, n, p)
            out[p] = _engine.first_passage_path(rng, 0.0, level, dt, max_steps, *reg.args())

    run_batches(work, n_paths, cfg.threads)
    return _from_samples(n, level, out)


def _delta_cov(p: np.ndarray, N: int) -> np.ndarray:
    return (np.diag(p) - np.outer(p, p)) / N


def _transform_68(locs: np.ndarray, p: np.ndarray, pc: float, cn: float, cm: float):
    """Push lambda^(m) (cells ``locs``, cemetery ``pc``) up to level c_n."""
    low = (locs >= cm) & (locs < cn)
    s1 = math.fsum(locs[low] * p[low]) / cn
    den = 1.0 - math.fsum((1.0 - locs[low] / cn) * p[low])
    hi = ~low
    q = p[hi] / den
    ql = locs[hi]
    at = np.flatnonzero(ql == cn)
    if at.size:
        q[at[0]] += s1 / den
    else:
        ql = np.append(ql, cn)
        q = np.append(q, s1 / den)
    order = np.argsort(-ql, kind="stable")
    return ql[order], q[order], pc / den


def recursion_check(est_n: InstantDistEstimate, est_m: InstantDistEstimate,
                    emb: StateEmbedding) -> float:
    """Largest cellwise gap, in SE units, between est_n and the level-n image of est_m."""
    if est_m.n < est_n.n:
        raise DimensionMismatch(f"need m >= n, got n = {est_n.n}, m = {est_m.n}")
    for e in (est_n, est_m):
        if e.level != emb.c_hat[e.n]:
            raise DimensionMismatch("estimate level differs from the embedding")
    cn, cm = float(emb.c_hat[est_n.n]), float(emb.c_hat[est_m.n])
    p = np.append(est_m.freq, est_m.cemetery)
    K = est_m.locations.size

    def image(pv: np.ndarray):
        ql, q, qc = _transform_68(est_m.locations, pv[:K], pv[K], cn, cm)
        return ql, np.append(q, qc)

    ql, q = image(p)
    # delta-method SE from the multinomial covariance of est_m
    h = 1e-7
    J = np.zeros((q.size, p.size))
    for k in range(p.size):
        dp = p.copy()
        dp[k] += h
        J[:, k] = (image(dp)[1] - q) / h
    se_q = np.sqrt(np.clip(np.diag(J @ _delta_cov(p, est_m.n_paths) @ J.T), 0, None))

    cells = np.union1d(ql, est_n.locations)
    worst = 0.0
    floor = 1.0 / min(est_n.n_paths, est_m.n_paths)
    for x in list(cells) + [None]:
        if x is None:
            a, sa, b, sb = q[-1], se_q[-1], est_n.cemetery, est_n.cemetery_se
        else:
            i = np.flatnonzero(ql == x)
            j = np.flatnonzero(est_n.locations == x)
            a = q[i[0]] if i.size else 0.0
            sa = se_q[i[0]] if i.size else 0.0
            b = est_n.freq[j[0]] if j.size else 0.0
            sb = est_n.se[j[0]] if j.size else 0.0
        d = abs(a - b)
        if d == 0:
            continue
        worst = max(worst, d / max(math.hypot(sa, sb), floor))
    return worst


# ------------------------------------------------------------- reconstruction

@dataclass(frozen=True)
class Reconstruction:
    """lambda on (c_hat[N], inf) and the cemetery, plus per-level quantities."""

    locations: np.ndarray
    weights: np.ndarray
    se: np.ndarray
    cemetery: float
    cemetery_se: float
    Lambda: dict
    Lambda_se: dict
    h: dict
    h_se: dict
    p2_tilde: float
    p2_tilde_se: float
    c0: float
    deepest: int

    def measure(self) -> AtomicMeasure:
        pos = self.weights > 0
        return AtomicMeasure(self.locations[pos], self.weights[pos], cemetery=self.cemetery)

    def inverse_Lambda(self, n: int, c_hat: np.ndarray) -> float:
        """1/Lambda_n recomputed from the reconstructed lambda."""
        cn, c0 = float(c_hat[n]), self.c0
        x, w = self.locations, self.weights
        above = self.cemetery + math.fsum(w[x > cn])
        top = self.cemetery + math.fsum(w[x > c0])
        mid = (x > cn) & (x <= c0)
        return above + (c0 * (1 - top) - math.fsum(x[mid] * w[mid])) / cn


def _ratio_terms(est: InstantDistEstimate, c0: float):
    """Lambda_n and the gradient of Lambda_n wrt the cell probabilities."""
    x = est.locations
    wts = np.where((x >= est.level) & (x < c0), 1.0 - x / c0, 0.0)
    Lam = 1.0 - math.fsum(wts * est.freq)
    return Lam, np.append(-wts, 0.0)


def reconstruct_lambda(estimates, emb: StateEmbedding,
                       threshold: float = INCONSISTENT_SE) -> Reconstruction:
    """Combine lambda^(n)/Lambda_n over levels by inverse-variance weights."""
    ests = sorted(estimates.values() if isinstance(estimates, dict) else estimates,
                  key=lambda e: e.n)
    if not ests:
        raise DimensionMismatch("no estimates")
    c0 = float(emb.c_hat[0])
    per_cell: dict = {}
    Lam, Lam_se, h, h_se = {}, {}, {}, {}
    for est in ests:
        if est.level != emb.c_hat[est.n]:
            raise DimensionMismatch("estimate level differs from the embedding")
        N = est.n_paths
        p = np.append(est.freq, est.cemetery)
        cov = _delta_cov(p, N)
        L, gL = _ratio_terms(est, c0)
        Lam[est.n], Lam_se[est.n] = L, float(math.sqrt(max(gL @ cov @ gL, 0.0)))
        cells = list(est.locations[est.locations > est.level]) + ["cemetery"]
        for key in cells:
            k = p.size - 1 if key == "cemetery" else int(np.flatnonzero(est.locations == key)[0])
            g = p[k] * -gL / L**2
            g[k] += 1.0 / L
            v = p[k] / L
            s = float(math.sqrt(max(g @ cov @ g, 0.0)))
            per_cell.setdefault(key, []).append((est.n, v, max(s, 1.0 / (N * L))))
        # cells present at coarser levels but unseen here carry zero mass
        k = np.flatnonzero(est.locations == est.level)
        pa = float(p[k[0]]) if k.size else 0.0
        g = np.zeros(p.size)
        if k.size:
            g[k[0]] = est.level / L
        g += est.level * pa * -gL / L**2
        h[est.n] = est.level * pa / L
        h_se[est.n] = float(math.sqrt(max(g @ cov @ g, 0.0)))
    for est in ests:
        for key in per_cell:
            if key != "cemetery" and key > est.level and not np.any(est.locations == key):
                per_cell[key].append((est.n, 0.0, 1.0 / (est.n_paths * Lam[est.n])))

    def combine(key):
        rows = per_cell[key]
        v = np.array([r[1] for r in rows])
        s = np.array([r[2] for r in rows])
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                z = abs(v[a] - v[b]) / math.hypot(s[a], s[b])
                if z > threshold:
                    raise InconsistentEstimates(
                        f"cell {key}: levels {rows[a][0]} and {rows[b][0]} differ by {z:.1f} SE")
        w = 1.0 / s**2
        return float(math.fsum(w * v) / math.fsum(w)), float(1.0 / math.sqrt(math.fsum(w)))

    cem, cem_se = combine("cemetery")
    locs = np.array(sorted((k for k in per_cell if k != "cemetery"), reverse=True), float)
    pairs = [combine(k) for k in locs]
    wts = np.array([p[0] for p in pairs])
    ses = np.array([p[1] for p in pairs])
    wedge = np.minimum(locs, c0)
    p2t = c0 * (1 - cem) - math.fsum(wedge * wts)
    p2t_se = math.sqrt((c0 * cem_se) ** 2 + math.fsum((wedge * ses) ** 2))
    return Reconstruction(locs, wts, ses, cem, cem_se, Lam, Lam_se, h, h_se, p2t, p2t_se,
                          c0, ests[-1].n)


def recover_params(rec: Reconstruction, p2_tilde: float | None = None) -> FellerParams:
    """(p1, p2, p3, p4) = (lambda(cemetery), p2_tilde, 0, lambda on (0, inf)), normalized."""
    p2 = rec.p2_tilde if p2_tilde is None else p2_tilde
    pos = rec.weights > 0
    p4 = AtomicMeasure(rec.locations[pos], rec.weights[pos])
    return FellerParams(max(rec.cemetery, 0.0), max(p2, 0.0), 0.0, p4).normalized()


def recovery_se(rec: Reconstruction) -> dict:
    """SEs of the normalized recovered parameters (normalizer treated as exact)."""
    pos = rec.weights > 0
    total = max(rec.cemetery, 0) + max(rec.p2_tilde, 0) + math.fsum(
        np.minimum(rec.locations[pos], 1.0) * rec.weights[pos])
    return {"p1": rec.cemetery_se / total, "p2": rec.p2_tilde_se / total,
            "p4": (rec.se[pos] / total).tolist()}


# ------------------------------------------------------ closed forms from lambda

def lambda_from_feller(fp: FellerParams, emb: StateEmbedding) -> AtomicMeasure:
    """lambda = k (p1 delta_cemetery + p4) with k set by lambda^(0) being a probability."""
    c0 = float(emb.c_hat[0])
    k = c0 / (fp.p2 + c0 * fp.p1 + fp.p4.wedge_mass(c0))
    return AtomicMeasure(fp.p4.locations, fp.p4.weights * k, cemetery=fp.p1 * k)


def _lambda_parts(lam: AtomicMeasure, c_hat: np.ndarray, n: int):
    c0, cn = float(c_hat[0]), float(c_hat[n])
    x, w = lam.locations, lam.weights
    top = lam.cemetery + math.fsum(w[x > c0])
    mid = (x > cn) & (x <= c0)
    hn = c0 * (1 - top) - math.fsum(x[mid] * w[mid])
    inv = lam.cemetery + math.fsum(w[x > cn]) + hn / cn
    return 1.0 / inv, hn


def instant_dist_closed_form(lam: AtomicMeasure, emb: StateEmbedding, n: int) -> AtomicMeasure:
    """lambda^(n) built from lambda, Lambda_n and the atom at c_hat[n]."""
    cn = float(emb.c_hat[n])
    L, hn = _lambda_parts(lam, emb.c_hat, n)
    x, w = lam.locations, lam.weights
    up = x > cn
    loc = np.append(x[up], cn)
    wt = np.append(L * w[up], L * hn / cn)
    keep = wt > 0
    return AtomicMeasure(loc[keep], wt[keep], cemetery=L * lam.cemetery)


def p2_tilde_sequence(lam: AtomicMeasure, emb: StateEmbedding, n_max: int) -> np.ndarray:
    return np.array([_lambda_parts(lam, emb.c_hat, n)[1] for n in range(n_max + 1)])


def allocated_closed_form(lam: AtomicMeasure, emb: StateEmbedding, n: int):
    """Entry law of the chain into levels 0..n after approaching infinity.

    Returns (level weights of length n + 1, cemetery weight).
    """
    ch = emb.c_hat
    L, hn = _lambda_parts(lam, ch, n)
    x, w = lam.locations, lam.weights
    out = np.zeros(n + 1)

    def up_part(i):  # from (c_{i+1}, c_i], weight (x - c_{i+1}) / (c_i - c_{i+1})
        s = (x > ch[i + 1]) & (x <= ch[i])
        return math.fsum((x[s] - ch[i + 1]) / (ch[i] - ch[i + 1]) * w[s])

    def down_part(i):  # from (c_i, c_{i-1}), weight (c_{i-1} - x) / (c_{i-1} - c_i)
        s = (x > ch[i]) & (x < ch[i - 1])
        return math.fsum((ch[i - 1] - x[s]) / (ch[i - 1] - ch[i]) * w[s])

    beyond = math.fsum(w[x > ch[0]])
    if n == 0:
        out[0] = L * (hn / ch[0] + beyond)
    else:
        out[0] = L * (up_part(0) + beyond)
        for i in range(1, n):
            out[i] = L * (up_part(i) + down_part(i))
        out[n] = L * (hn / ch[n] + down_part(n))
    return out, L * lam.cemetery


# ------------------------------------------------------------- chain approximants

@dataclass(frozen=True)
class ChainInstantEstimate:
    n: int
    freq: np.ndarray
    se: np.ndarray
    cemetery: float
    cemetery_se: float
    n_samples: int

    @property
    def total(self) -> float:
        return math.fsum(self.freq) + self.cemetery


def _chain_estimate(n: int, samples: np.ndarray) -> ChainInstantEstimate:
    N = samples.size
    cnt = np.bincount(samples[samples >= 0], minlength=n + 1)[: n + 1]
    f = cnt / N
    pc = float(np.sum(samples == -1)) / N
    return ChainInstantEstimate(n, f, _bernoulli_se(f, N), pc,
                                float(_bernoulli_se(np.array(pc), N)), N)


def chain_surgery(tr: TraceChainPath, n: int) -> tuple[TraceChainPath, np.ndarray]:
    """Doob-chain path of level n and the entry levels it used (-1 = cemetery)."""
    ct, lv, bt = tr.chain_times, tr.levels, tr.boundary_times
    hit = np.flatnonzero((lv <= n) | (lv == -1))
    keep = np.ones(ct.size, bool)
    shift = np.zeros(ct.size)
    entries = []
    pos, total = -math.inf, 0.0
    cut_a, cut_b = [], []
    while True:
        q = np.searchsorted(bt, pos, side="right")
        if q >= bt.size:
            break
        eta = bt[q]
        r = np.searchsorted(ct[hit], eta, side="left")
        if r >= hit.size:
            keep &= ct < eta
            cut_a.append(eta)
            cut_b.append(math.inf)
            break
        k = hit[r]
        entries.append(int(lv[k]))
        keep &= ~((ct >= eta) & (ct < ct[k]))
        cut_a.append(eta)
        cut_b.append(ct[k])
        if lv[k] == -1:
            break
        pos = ct[k]
    for a, b in zip(cut_a, cut_b):
        if math.isfinite(b):
            shift[ct >= b] += b - a
            total += b - a
        else:
            total += max(tr.horizon - a, 0.0)
    new = ct[keep] - shift[keep]
    life = tr.lifetime
    if math.isfinite(life):
        life = life - total
    out = TraceChainPath(new, lv[keep], life, tr.horizon - total, np.zeros(0))
    return out, np.array(entries, np.int64)


def chain_approximant(traces, emb: StateEmbedding, n: int):
    """Level-n Doob-chain paths and the pooled entry frequencies."""
    if n >= emb.n_levels:
        raise LevelMismatch("level beyond the embedding")
    paths, samples = [], []
    for tr in traces:
        p, s = chain_surgery(tr, n)
        paths.append(p)
        samples.append(s)
    samples = np.concatenate(samples) if samples else np.zeros(0, np.int64)
    return paths, _chain_estimate(n, samples)


def estimate_chain_instant_dist(fp: FellerParams, n: int, n_paths: int, cfg: SimConfig,
                                emb: StateEmbedding,
                                max_steps: int = 10**9) -> ChainInstantEstimate:
    """Entry law into levels 0..n from Y_0 = 0 with one excursion per path."""
    levels = np.ascontiguousarray(emb.c_hat[: n + 1], float)
    reg = _engine.regime_from_feller(fp)
    dt = level_dt(cfg.dt, float(levels[-1]))
    out = np.empty(n_paths, np.int64)

    def work(s: int, e: int) -> None:
        for p in range(s, e):
            rng = path_rng(cfg.seed, STREAM_VISIT, n, p)
            out[p] = _engine.first_visit_path(rng, 0.0, levels, dt, max_steps, *reg.args())

    run_batches(work, n_paths, cfg.threads)
    return _chain_estimate(n, out[out >= -1])


# ---------------------------------------------------------- convergence in n

_TAU_T = np.geomspace(2e-3, 60.0, 6000)


def _exit_cdf(t: np.ndarray) -> np.ndarray:
    """P(exit time of BM from (-1, 1) <= t)."""
    out = np.empty_like(t)
    small = t < 0.5
    ts = t[small]
    k = np.arange(8)[:, None]
    out[small] = 2 * np.sum((-1.0) ** k * special.erfc((2 * k + 1) / np.sqrt(2 * ts)), axis=0)
    tl = t[~small]
    out[~small] = 1 - 4 / np.pi * np.sum(
        (-1.0) ** k / (2 * k + 1) * np.exp(-(2 * k + 1) ** 2 * np.pi**2 * tl / 8), axis=0)
    return np.clip(out, 0.0, 1.0)


_TAU_F = np.maximum.accumulate(_exit_cdf(_TAU_T))


def sample_exit_time(rng: np.random.Generator, size: int) -> np.ndarray:
    """Exit times of BM from (-1, 1), by inverting a tabulated CDF."""
    return np.exp(np.interp(rng.random(size), _TAU_F, np.log(_TAU_T)))


def rho_reflecting(t: float, c: float, n_paths: int, seed: int, key: int = 0,
                   block: int = 4096) -> np.ndarray:
    """Discarded duration before output time t for reflecting BM from 0.

    The path alternates between climbing from 0 to c (discarded, c^2 times an
    exit time) and falling from c to 0 (kept, c^2 / Z^2).
    """
    out = np.empty(n_paths)
    c2 = c * c
    for p in range(n_paths):
        rng = path_rng(seed, STREAM_RHO, key, p)
        kept, rho = 0.0, 0.0
        while True:
            up = c2 * sample_exit_time(rng, block)
            down = c2 / rng.standard_normal(block) ** 2
            cd = kept + np.cumsum(down)
            K = int(np.searchsorted(cd, t))
            if K < block:
                rho += math.fsum(up[: K + 1])
                break
            rho += math.fsum(up)
            kept = cd[-1]
        out[p] = rho
    return out


def _rho_and_sup(path: SamplePath, emb: StateEmbedding, n: int, t: float, eps: float):
    sch = excursion_times(path, emb, n, eps)
    out, _ = c_transform(path, sch)
    k = np.searchsorted(out.times, t, side="left")
    if k >= out.times.size:
        return math.nan, math.nan
    rho = float(out.aux["source_time"][k] - out.times[k])
    m = out.times <= t
    a, b = out.values[m], path.value_at(out.times[m])
    ok = (a != CEMETERY) & (b != CEMETERY)
    sup = float(np.max(np.abs(a[ok] - b[ok]))) if np.any(ok) else math.nan
    return rho, sup


def convergence_diagnostic(fp: FellerParams, t: float, n_list, n_paths: int, cfg: SimConfig,
                           emb: StateEmbedding, n_grid_paths: int | None = None,
                           horizon: float | None = None) -> list[dict]:
    """Per level: summary of rho^(n)_t and the median sup-distance up to t.

    For reflecting BM rho is sampled exactly; otherwise it is read off grid
    paths. The sup-distance always uses grid paths and is NaN for levels
    inside the boundary band.
    """
    if fp.p3 > 0:
        warnings.warn("the approximation statement assumes p3 = 0", stacklevel=2)
    n_list = [int(n) for n in n_list]
    eps = cfg.bandwidth
    ok_levels = [n for n in n_list if emb.c_hat[n] > 2 * eps]
    reflecting = fp.p1 == 0 and fp.p3 == 0 and fp.p4.empty and fp.p2 > 0
    ng = n_paths if n_grid_paths is None else n_grid_paths
    if reflecting:
        ng = min(ng, n_paths)
    H = 4.0 * t if horizon is None else horizon
    grid_rho = {n: np.full(ng, np.nan) for n in n_list}
    grid_sup = {n: np.full(ng, np.nan) for n in n_list}
    for p in range(ng):
        path, _ = simulate_feller_bm(fp, cfg, 0.0, p, levels=np.zeros(0), horizon=H)
        for n in ok_levels:
            grid_rho[n][p], grid_sup[n][p] = _rho_and_sup(path, emb, n, t, eps)
    rows = []
    for n in n_list:
        if reflecting:
            rho = rho_reflecting(t, float(emb.c_hat[n]), n_paths, cfg.seed, n)
        else:
            rho = grid_rho[n][np.isfinite(grid_rho[n])]
        sup = grid_sup[n][np.isfinite(grid_sup[n])]
        rows.append({
            "n": n,
            "rho_mean": float(np.mean(rho)) if rho.size else math.nan,
            "rho_median": float(np.median(rho)) if rho.size else math.nan,
            "rho_p95": float(np.quantile(rho, 0.95)) if rho.size else math.nan,
            "sup_diff_median": float(np.median(sup)) if sup.size else math.nan,
            "n_rho": int(rho.size),
        })
    return rows
