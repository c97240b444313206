"""Compiled path kernels shared by the simulation modules.

Every Feller's Brownian motion with a finite jump measure is simulated in its
piecing-out form. When p2 > 0 the path is reflecting BM whose boundary local
time triggers events at rate (p1 + |p4|) / p2; when p2 = 0 it is BM killed at
0 (Brownian-bridge crossing test) followed by an immediate event. An event
kills with probability p1 / (p1 + |p4|) and otherwise jumps according to
p4 / |p4|. Sojourn at 0 is not represented: it adds time only at 0, where no
embedded-level clock grows.

The reflecting step is the exact Skorokhod step: given the Gaussian increment,
the minimum of the Brownian bridge is sampled and the local-time increment is
its negative part. Boundary local time is therefore exact in law on the grid.

Each kernel consumes one numpy Generator per path, so results depend only on
(seed, path index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .bd_core import FellerParams

KILLED = -1.0
# exp(-2 y z / dt) below exp(-25) is treated as zero in bridge tests
BRIDGE_CUT = 12.5


@dataclass(frozen=True)
class Regime:
    reflect: bool
    hazard: float
    p_kill: float
    jump_loc: np.ndarray
    jump_cdf: np.ndarray
    upper: float

    def args(self):
        return (self.reflect, self.hazard, self.p_kill, self.jump_loc, self.jump_cdf,
                self.upper)


def regime_from_feller(fp: FellerParams, upper: float = math.inf) -> Regime:
    """Piecing-out description of ``fp``; p3 plays no role in these kernels.

    ``upper`` is a reflecting ceiling; jump destinations above it are moved
    to it.
    """
    p4 = fp.p4
    mass = p4.total_mass
    rate = fp.p1 + mass
    p_kill = fp.p1 / rate if rate > 0 else 1.0
    if mass > 0:
        cdf = np.cumsum(p4.weights) / mass
        cdf[-1] = 1.0
        loc = np.minimum(p4.locations, upper)
    else:
        cdf = np.ones(0)
        loc = np.zeros(0)
    hazard = rate / fp.p2 if fp.p2 > 0 else math.inf
    return Regime(fp.p2 > 0, hazard, p_kill, loc.astype(float), cdf.astype(float),
                  float(upper))


def band_table(c_hat: np.ndarray, mu: np.ndarray, eps: float, mirror: float):
    """Piecewise-constant clock density sum_n mu_n/(2 eps) * band_n(y).

    band_n is the indicator of |y - c_n| < eps plus ``mirror`` times the
    indicator of y + c_n < eps (+1 for reflected paths, -1 for paths killed
    at 0). Returns breakpoints bp (bp[0] = 0, bp[-1] = inf) and values on
    [bp[i], bp[i+1]).
    """
    pts = {0.0}
    ev = []
    for c, m in zip(c_hat, mu):
        w = m / (2.0 * eps)
        lo, hi = max(c - eps, 0.0), c + eps
        ev.append((lo, w))
        ev.append((hi, -w))
        pts.update((lo, hi))
        if mirror != 0.0 and c < eps:
            ev.append((0.0, mirror * w))
            ev.append((eps - c, -mirror * w))
            pts.add(eps - c)
    bp = np.array(sorted(pts))
    val = np.zeros(bp.size)
    locs = np.array([e[0] for e in ev])
    ws = np.array([e[1] for e in ev])
    np.add.at(val, np.searchsorted(bp, locs), ws)
    val = np.cumsum(val)
    val[np.abs(val) < 1e-12 * np.max(np.abs(val))] = 0.0
    val = np.maximum(val, 0.0)
    return np.append(bp, np.inf), np.append(val, 0.0)


def target_table(bp: np.ndarray, c_hat: np.ndarray, tgt: np.ndarray, eps: float,
                 mirror: float) -> np.ndarray:
    """Per-piece band weights of the target levels (pieces of ``bp``)."""
    mid = np.empty(bp.size)
    mid[:-1] = 0.5 * (bp[:-1] + np.minimum(bp[1:], bp[:-1] + 1.0))
    mid[-1] = bp[-2] + 1.0
    out = np.zeros((bp.size, tgt.size))
    for j, n in enumerate(tgt):
        c = c_hat[n]
        w = (np.abs(mid - c) < eps).astype(float)
        w += mirror * (mid + c < eps)
        out[:, j] = w / (2.0 * eps)
    return out


def cell_index(bp: np.ndarray, upper: float, h: float):
    """Uniform lookup of the piece containing each cell's left end on
    [0, upper]; returns (cell, 1 / h)."""
    n = int(math.ceil(upper / h)) + 2
    cell = np.searchsorted(bp, np.arange(n) * h, side="right") - 1
    return cell.astype(np.int64), 1.0 / h


def half_step_factors(val: np.ndarray, alphas: np.ndarray, dt: float) -> np.ndarray:
    """exp(-alpha * val * dt / 4) per (alpha, piece).

    The trapezoid increment over a step from piece i to piece j is
    dA = (val[i] + val[j]) dt / 2, so exp(-alpha dA / 2) = H[i] H[j] and the
    running discount needs no exp calls inside the path loop.
    """
    return np.exp(-np.outer(alphas, val) * dt / 4.0)


@njit(cache=True, inline="always")
def _locate(bp, y, i):
    while y < bp[i]:
        i -= 1
    while y >= bp[i + 1]:
        i += 1
    return i


@njit(cache=True)
def _event(rng, p_kill, jump_loc, jump_cdf):
    if p_kill >= 1.0 or jump_loc.size == 0 or rng.random() < p_kill:
        return KILLED
    k = np.searchsorted(jump_cdf, rng.random(), side="right")
    if k >= jump_loc.size:
        k = jump_loc.size - 1
    return jump_loc[k]


@njit(cache=True, inline="always")
def _needs_bridge(y, z, dt):
    return z < 0.0 or y * z < BRIDGE_CUT * dt


@njit(cache=True, inline="always")
def _skorokhod(y, z, dt, ex):
    """Reflected endpoint and local-time increment given the bridge minimum
    drawn from the exponential variate ``ex``."""
    xi = z - y
    m = 0.5 * (y + z - math.sqrt(xi * xi + 2.0 * dt * ex))
    if m < 0.0:
        return z - m, -m
    return z, 0.0


@njit(cache=True, inline="always")
def _touch_prob(y, z, dt):
    # probability that the bridge from y > 0 to z touches 0
    if z <= 0.0:
        return 1.0
    a = y * z
    if a < BRIDGE_CUT * dt:
        return math.exp(-2.0 * a / dt)
    return 0.0


@njit(cache=True, inline="always")
def _up_prob(y, z, c, dt):
    # probability that the bridge from y < c to z reaches c
    if z >= c:
        return 1.0
    a = (c - y) * (c - z)
    if a < BRIDGE_CUT * dt:
        return math.exp(-2.0 * a / dt)
    return 0.0


@njit(cache=True, inline="always")
def _down_prob(y, z, c, dt):
    if z <= c:
        return 1.0
    a = (y - c) * (z - c)
    if a < BRIDGE_CUT * dt:
        return math.exp(-2.0 * a / dt)
    return 0.0


@njit(cache=True, nogil=True)
def _nearest(c_hat, y):
    # c_hat strictly decreasing
    lo = 0
    hi = c_hat.size - 1
    if y >= c_hat[0]:
        return 0
    if y <= c_hat[hi]:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if c_hat[mid] > y:
            lo = mid
        else:
            hi = mid
    if c_hat[lo] - y <= y - c_hat[hi]:
        return lo
    return hi


@njit(cache=True, nogil=True)
def _placement(y, A, next_sample, c_hat, mu_lev, eps, tgt, alphas, d_chain, prim, sec, disc):
    """Local time the band estimator misses when the path is placed at y.

    From y at distance d < eps of c, the band average (1/2eps) int_band G(y, x) dx
    falls short of G(y, c) by (eps - d)^2 / (2 eps), since G(y, .) is linear
    apart from its kink at y. The deficit is booked at once at level c.
    Bands reaching 0 (c < eps) are left alone.
    """
    for n in range(c_hat.size):
        c = c_hat[n]
        if c < eps:
            break
        d = abs(y - c)
        if d >= eps:
            continue
        dA = mu_lev[n] * (eps - d) ** 2 / (2.0 * eps)
        for a in range(alphas.size):
            h = math.exp(-0.5 * alphas[a] * dA)
            for k in range(tgt.size):
                if tgt[k] == n:
                    prim[a, k] += disc[a] * h * dA
            disc[a] *= h * h
        An = A + dA
        while next_sample < An:
            for k in range(tgt.size):
                if tgt[k] == n:
                    for a in range(alphas.size):
                        sec[a, k] += d_chain * math.exp(-alphas[a] * next_sample)
            next_sample += d_chain
        A = An
    return A, next_sample


@njit(cache=True, nogil=True)
def trace_resolvent_path(rng, y0, dt, max_steps, reflect, hazard, p_kill, jump_loc,
                         jump_cdf, upper, bp, cell, inv_h, val, tw, H, bp2, cell2, inv_h2, val2,
                         tw2, H2, mu_tgt, tgt, alphas, t_chain, d_chain, c_hat, mu_lev, eps):
    """One path of the clock-integral estimators.

    Returns (prim, prim2, sec, status, steps, A_end). prim holds
    mu_j int e^{-alpha A} dL^j (rows alpha, columns targets) for the band
    clock of half-width eps, prim2 the same for half-width 2 eps (tables
    bp2 ... H2); sec holds the chain-time Riemann sum of e^{-alpha t} over
    samples of the eps-trace snapped to each target. status is 0 (chain
    horizon reached by both clocks), 1 (killed) or 2 (step budget exhausted).
    The tables (bp, val, tw, H) come from band_table, target_table and
    half_step_factors, and (cell, inv_h) from cell_index; increments use the
    trapezoid rule with the discount taken at the step midpoint. Each
    placement of the path (start, jump) inside a band adds the band
    estimator's expected local-time deficit, see _placement.
    """
    na = alphas.size
    nt = mu_tgt.size
    prim = np.zeros((na, nt))
    prim2 = np.zeros((na, nt))
    sec = np.zeros((na, nt))
    disc = np.ones(na)
    disc2 = np.ones(na)
    m = mu_tgt * (0.5 * dt)
    sq = math.sqrt(dt)
    y = y0
    A = 0.0
    A2 = 0.0
    ell = 0.0
    E = rng.exponential()
    i = _locate(bp, y, 0)
    i2 = _locate(bp2, y, 0)
    next_sample = 0.5 * d_chain
    A, next_sample = _placement(y, A, next_sample, c_hat, mu_lev, eps, tgt, alphas, d_chain,
                                prim, sec, disc)
    A2, _ = _placement(y, A2, math.inf, c_hat, mu_lev, 2.0 * eps, tgt, alphas, d_chain,
                       prim2, sec, disc2)
    status = 2
    steps = 0
    while steps < max_steps:
        steps += 1
        hit = False
        z = y + sq * rng.standard_normal()
        if reflect:
            if _needs_bridge(y, z, dt):
                z, dl = _skorokhod(y, z, dt, rng.exponential())
                ell += dl
        else:
            p = _touch_prob(y, z, dt)
            if p > 0.0 and (p >= 1.0 or rng.random() < p):
                hit = True
                z = 0.0
        if z > upper:
            z = 2.0 * upper - z
        c = int(z * inv_h)
        if c >= cell.size:
            c = cell.size - 1
        j = cell[c]
        while z >= bp[j + 1]:
            j += 1
        c = int(z * inv_h2)
        if c >= cell2.size:
            c = cell2.size - 1
        j2 = cell2[c]
        while z >= bp2[j2 + 1]:
            j2 += 1
        dA = 0.5 * (val[i] + val[j]) * dt
        if dA > 0.0:
            for a in range(na):
                h = H[a, i] * H[a, j]
                mid = disc[a] * h
                for k in range(nt):
                    prim[a, k] += mid * m[k] * (tw[i, k] + tw[j, k])
                disc[a] = mid * h
            An = A + dA
            # chain-time samples inside this step, snapped to the nearest
            # level of the post-step position
            while next_sample < An:
                lev = _nearest(c_hat, z)
                for k in range(nt):
                    if tgt[k] == lev:
                        for a in range(na):
                            sec[a, k] += d_chain * math.exp(-alphas[a] * next_sample)
                next_sample += d_chain
            A = An
        dA2 = 0.5 * (val2[i2] + val2[j2]) * dt
        if dA2 > 0.0:
            for a in range(na):
                h = H2[a, i2] * H2[a, j2]
                mid = disc2[a] * h
                for k in range(nt):
                    prim2[a, k] += mid * m[k] * (tw2[i2, k] + tw2[j2, k])
                disc2[a] = mid * h
            A2 += dA2
        y_end = z
        if reflect:
            if ell * hazard >= E:
                z = _event(rng, p_kill, jump_loc, jump_cdf)
                ell = 0.0
                E = rng.exponential()
        elif hit:
            z = _event(rng, p_kill, jump_loc, jump_cdf)
        if z == KILLED:
            status = 1
            break
        if A >= t_chain and A2 >= t_chain:
            status = 0
            break
        i = j
        i2 = j2
        if z != y_end:
            # relocate after a jump
            i = _locate(bp, z, i)
            i2 = _locate(bp2, z, i2)
            A, next_sample = _placement(z, A, next_sample, c_hat, mu_lev, eps, tgt, alphas,
                                        d_chain, prim, sec, disc)
            A2, _ = _placement(z, A2, math.inf, c_hat, mu_lev, 2.0 * eps, tgt, alphas, d_chain,
                               prim2, sec, disc2)
        y = z
    return prim, prim2, sec, status, steps, A


@njit(cache=True, nogil=True)
def first_passage_path(rng, y0, level, dt, max_steps, reflect, hazard, p_kill, jump_loc,
                       jump_cdf, upper):
    """Value of the path at the first time it is >= ``level``.

    Continuous up-crossings (including bridge crossings inside a step) record
    ``level`` itself; a jump records its destination. Returns KILLED if the
    path dies first and NaN if the step budget runs out.
    """
    sq = math.sqrt(dt)
    y = y0
    if y >= level:
        return y
    ell = 0.0
    E = rng.exponential()
    for _ in range(max_steps):
        hit = False
        z = y + sq * rng.standard_normal()
        if reflect:
            if _needs_bridge(y, z, dt):
                z, dl = _skorokhod(y, z, dt, rng.exponential())
                ell += dl
        else:
            p = _touch_prob(y, z, dt)
            if p > 0.0 and (p >= 1.0 or rng.random() < p):
                hit = True
                z = 0.0
        p = _up_prob(y, z, level, dt)
        if p > 0.0 and (p >= 1.0 or rng.random() < p):
            return level
        if reflect:
            if ell * hazard >= E:
                z = _event(rng, p_kill, jump_loc, jump_cdf)
                ell = 0.0
                E = rng.exponential()
        elif hit:
            z = _event(rng, p_kill, jump_loc, jump_cdf)
        if z == KILLED:
            return KILLED
        if z >= level:
            return z
        y = z
    return np.nan


@njit(cache=True, nogil=True)
def first_visit_path(rng, y0, levels, dt, max_steps, reflect, hazard, p_kill, jump_loc,
                     jump_cdf, upper):
    """Index of the first of ``levels`` (strictly decreasing) visited.

    Returns -1 if killed first and -2 if the step budget runs out. Between two
    adjacent levels the path is plain BM and crossings are decided by the
    bridge test; below the deepest level the boundary regime applies.
    """
    sq = math.sqrt(dt)
    nl = levels.size
    y = y0
    ell = 0.0
    E = rng.exponential()
    for _ in range(max_steps):
        # exact landing on a level (start point or jump destination)
        k = _nearest(levels, y)
        if y == levels[k]:
            return k
        if y > levels[0]:
            z = y + sq * rng.standard_normal()
            if z > upper:
                z = 2.0 * upper - z
            p = _down_prob(y, z, levels[0], dt)
            if p > 0.0 and (p >= 1.0 or rng.random() < p):
                return 0
            y = z
            continue
        if y > levels[nl - 1]:
            # bracket (levels[k+1], levels[k])
            if levels[k] < y:
                k -= 1
            hi = levels[k]
            lo = levels[k + 1]
            z = y + sq * rng.standard_normal()
            pu = _up_prob(y, z, hi, dt)
            pd = _down_prob(y, z, lo, dt)
            up = pu > 0.0 and (pu >= 1.0 or rng.random() < pu)
            dn = pd > 0.0 and (pd >= 1.0 or rng.random() < pd)
            if up and dn:
                # both barriers inside one step: decide by the endpoint side
                return k if z - y > 0 else k + 1
            if up:
                return k
            if dn:
                return k + 1
            y = z
            continue
        hit = False
        z = y + sq * rng.standard_normal()
        if reflect:
            if _needs_bridge(y, z, dt):
                z, dl = _skorokhod(y, z, dt, rng.exponential())
                ell += dl
        else:
            p = _touch_prob(y, z, dt)
            if p > 0.0 and (p >= 1.0 or rng.random() < p):
                hit = True
                z = 0.0
        p = _up_prob(y, z, levels[nl - 1], dt)
        if p > 0.0 and (p >= 1.0 or rng.random() < p):
            return nl - 1
        if reflect:
            if ell * hazard >= E:
                z = _event(rng, p_kill, jump_loc, jump_cdf)
                ell = 0.0
                E = rng.exponential()
        elif hit:
            z = _event(rng, p_kill, jump_loc, jump_cdf)
        if z == KILLED:
            return -1
        y = z
    return -2


@njit(cache=True, nogil=True)
def killed_laplace_path(rng, x0, alpha, dt, max_steps):
    """exp(-alpha tau_0) for BM from x0, with tau_0 at the midpoint of the
    step in which the bridge touches 0 (0 if the budget runs out)."""
    sq = math.sqrt(dt)
    y = x0
    for n in range(max_steps):
        z = y + sq * rng.standard_normal()
        p = _touch_prob(y, z, dt)
        if p > 0.0 and (p >= 1.0 or rng.random() < p):
            return math.exp(-alpha * (n + 0.5) * dt)
        y = z
    return 0.0
