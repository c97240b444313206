"""Birth-death rate data, scale and speed, the state embedding, and the
parameter containers on both sides of the correspondence.

Levels are indexed 0..cap-1 for rates and speed, 0..cap for the scale and the
embedded coordinates c_hat.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import (
    AtomBelowTruncation,
    CapTooSmall,
    InfiniteScale,
    InvalidChainParams,
    InvalidFellerParams,
    MinimalCase,
    NonPositiveRate,
    TailDivergent,
)

RATIO_LIMIT = 0.999
N_RATIOS = 5


class BoundaryClass(str, Enum):
    REGULAR = "Regular"
    EXIT = "Exit"
    OTHER = "Other"


@dataclass(frozen=True)
class BirthDeathMatrix:
    a: np.ndarray
    b: np.ndarray
    cap: int

    @property
    def q(self) -> np.ndarray:
        return self.a + self.b

    def dense(self, n: int | None = None) -> np.ndarray:
        """Leading n x n block of Q (rows still lose mass at level n-1)."""
        n = self.cap if n is None else n
        Q = np.zeros((n, n))
        for k in range(n):
            Q[k, k] = -(self.a[k] + self.b[k])
            if k + 1 < n:
                Q[k, k + 1] = self.b[k]
            if k >= 1:
                Q[k, k - 1] = self.a[k]
        return Q


def build_matrix(a, b, cap: int) -> BirthDeathMatrix:
    if cap < 3:
        raise CapTooSmall(f"cap must be at least 3, got {cap}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < cap or b.size < cap:
        raise ValueError("rate sequences shorter than cap")
    a = a[:cap].copy()
    b = b[:cap].copy()
    if a[0] != 0.0:
        raise NonPositiveRate(0, "a[0] must be 0")
    for k in range(1, cap):
        if not a[k] > 0:
            raise NonPositiveRate(k, f"death rate a[{k}] = {a[k]} is not positive")
    for k in range(cap):
        if not b[k] > 0:
            raise NonPositiveRate(k, f"birth rate b[{k}] = {b[k]} is not positive")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("rates must be finite")
    a.setflags(write=False)
    b.setflags(write=False)
    return BirthDeathMatrix(a, b, int(cap))


def geometric_matrix(cap: int = 60, r_a: float = 4.0, r_b: float = 4.0,
                     a1: float = 2.0) -> BirthDeathMatrix:
    """b_k = r_b**k and a_k = a1 * r_a**(k-1); the defaults give Q_GEO."""
    k = np.arange(cap, dtype=float)
    b = r_b ** k
    a = np.zeros(cap)
    a[1:] = a1 * r_a ** (k[1:] - 1)
    return build_matrix(a, b, cap)


def q_geo(cap: int = 60) -> BirthDeathMatrix:
    return geometric_matrix(cap)


def _geometric_tail(terms: np.ndarray) -> tuple[bool, float, float]:
    """Test the last ratios of a positive series and extrapolate its tail.

    Returns (converged, tail estimate, tail uncertainty).
    """
    t = terms[-(N_RATIOS + 1):]
    if t.size < N_RATIOS + 1 or np.any(t <= 0):
        return False, math.inf, math.inf
    r = t[1:] / t[:-1]
    if not np.all(r < RATIO_LIMIT):
        return False, math.inf, math.inf
    r_mean = float(np.mean(r))
    r_max = float(np.max(r))
    tail = t[-1] * r_mean / (1 - r_mean)
    tail_hi = t[-1] * r_max / (1 - r_max)
    return True, float(tail), float(abs(tail_hi - tail) + 4 * np.finfo(float).eps * tail)


@dataclass(frozen=True)
class ScaleSpeed:
    c: np.ndarray
    mu: np.ndarray
    dc: np.ndarray
    c_inf: float
    c_inf_err: float
    c_hat: np.ndarray | None
    R_partial: float
    S_partial: float
    R_converged: bool
    S_converged: bool
    boundary_class: BoundaryClass
    cap: int

    @property
    def regular(self) -> bool:
        return self.boundary_class == BoundaryClass.REGULAR


def compute_scale_speed(Q: BirthDeathMatrix) -> ScaleSpeed:
    cap = Q.cap
    # running products mu_k = mu_{k-1} b_{k-1} / a_k kept as mantissa and
    # binary exponent (a base-2 log scale), so rates growing like 4^k neither
    # overflow nor pick up the rounding of exp(log(.))
    mant = np.empty(cap)
    expo = np.empty(cap, dtype=np.int64)
    m, e = 0.5, 1
    for k in range(cap):
        if k > 0:
            m, de = math.frexp(m * (Q.b[k - 1] / Q.a[k]))
            e += de
        mant[k], expo[k] = m, e
    mu = np.ldexp(mant, expo)
    dc = np.ldexp(1.0 / (2.0 * mant * Q.b), -expo)
    c = np.concatenate([[0.0], np.cumsum(dc)])

    m_cum = np.cumsum(mu)
    r_terms = dc * m_cum
    s_terms = c[:-1] * mu
    R_ok, R_tail, _ = _geometric_tail(r_terms)
    S_ok, S_tail, _ = _geometric_tail(s_terms[1:])
    R_partial = float(math.fsum(r_terms))
    S_partial = float(math.fsum(s_terms))
    if R_ok and S_ok:
        cls = BoundaryClass.REGULAR
    elif R_ok:
        cls = BoundaryClass.EXIT
    else:
        cls = BoundaryClass.OTHER

    c_ok, c_tail, c_tail_err = _geometric_tail(dc)
    if not c_ok:
        ss = ScaleSpeed(c, mu, dc, math.inf, math.inf, None, R_partial, S_partial,
                        R_ok, S_ok, BoundaryClass.OTHER, cap)
        raise TailDivergent("scale increments are not summable within the cap", ss)
    # c_hat_n = c_inf - c_n built as a reverse tail sum, which keeps the deep
    # levels exact instead of cancelling against c_inf
    c_hat = np.empty(cap + 1)
    c_hat[cap] = c_tail
    c_hat[:cap] = c_tail + np.cumsum(dc[::-1])[::-1]
    c_inf = float(c[cap] + c_tail)
    return ScaleSpeed(c, mu, dc, c_inf, c_tail_err, c_hat, R_partial, S_partial,
                      R_ok, S_ok, cls, cap)


def classify_boundary(ss: ScaleSpeed) -> BoundaryClass:
    if not math.isfinite(ss.c_inf):
        return BoundaryClass.OTHER
    if ss.R_converged and ss.S_converged:
        return BoundaryClass.REGULAR
    if ss.R_converged:
        return BoundaryClass.EXIT
    return BoundaryClass.OTHER


@dataclass(frozen=True)
class StateEmbedding:
    c_hat: np.ndarray
    c_inf: float
    tail_err: float

    @property
    def n_levels(self) -> int:
        return self.c_hat.size

    def level_of(self, x: float) -> int:
        """Xi: the level n with c_hat[n] == x exactly."""
        # c_hat is strictly decreasing; search on the reversed view
        rev = self.c_hat[::-1]
        pos = int(np.searchsorted(rev, x))
        if pos < rev.size and rev[pos] == x:
            return self.c_hat.size - 1 - pos
        raise KeyError(f"{x!r} is not an embedded state")

    def point(self, n: int) -> float:
        return float(self.c_hat[n])

    def nearest_level(self, x: float) -> int:
        return int(np.argmin(np.abs(self.c_hat - x)))


def state_embedding(ss: ScaleSpeed) -> StateEmbedding:
    if not math.isfinite(ss.c_inf) or ss.c_hat is None:
        raise InfiniteScale("c_inf is infinite; no embedding exists")
    c_hat = ss.c_hat.copy()
    c_hat.setflags(write=False)
    return StateEmbedding(c_hat, ss.c_inf, ss.c_inf_err)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite list of atoms on (0, inf) in decreasing location order.

    ``cemetery`` holds mass on the cemetery state and is only used for
    instantaneous distributions. A truncated infinite measure records the
    (1 ^ x)-mass of the dropped atoms in ``tail_bound``.
    """

    locations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    truncated: bool = False
    trunc_index: int | None = None
    tail_bound: float = 0.0
    cemetery: float = 0.0

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if loc.size != w.size:
            raise ValueError("locations and weights differ in length")
        if np.any(loc <= 0) or np.any(w <= 0):
            raise ValueError("atom locations and weights must be positive")
        order = np.argsort(-loc, kind="stable")
        loc, w = loc[order], w[order]
        if loc.size > 1 and np.any(np.diff(loc) >= 0):
            raise ValueError("atom locations must be distinct")
        if self.cemetery < 0 or self.tail_bound < 0:
            raise ValueError("negative mass")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_pairs(cls, pairs, **kw) -> AtomicMeasure:
        pairs = list(pairs)
        if not pairs:
            return cls(**kw)
        loc, w = zip(*pairs)
        return cls(np.array(loc, float), np.array(w, float), **kw)

    @property
    def empty(self) -> bool:
        return self.locations.size == 0 and not self.truncated

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.weights))

    def wedge_mass(self, c: float = 1.0) -> float:
        """Integral of (x ^ c) over the stored atoms."""
        return float(math.fsum(np.minimum(self.locations, c) * self.weights))

    def scaled(self, s: float) -> AtomicMeasure:
        return replace(self, weights=self.weights * s, tail_bound=self.tail_bound * s,
                       cemetery=self.cemetery * s)


def truncated_power_measure(emb: StateEmbedding, K: int, power: float = 0.5,
                            scale: float = 1.0) -> AtomicMeasure:
    """Atoms scale * 2**(n*power) at c_hat[n], n = 1..K, as a truncation of an
    infinite measure whose (1 ^ x)-mass converges geometrically."""
    n = np.arange(1, K + 1)
    loc = emb.c_hat[n]
    w = scale * 2.0 ** (n * power)
    # tail sum over n > K of c_hat[n] * w_n, geometric in the dropped levels
    ratio = (emb.c_hat[K] / emb.c_hat[K - 1]) * 2.0 ** power
    tail = float(emb.c_hat[K] * w[-1] * ratio / (1 - ratio)) if ratio < 1 else math.inf
    return AtomicMeasure(loc, w, truncated=True, trunc_index=K, tail_bound=tail)


@dataclass(frozen=True)
class FellerParams:
    p1: float
    p2: float
    p3: float
    p4: AtomicMeasure = field(default_factory=AtomicMeasure)

    def __post_init__(self):
        for name in ("p1", "p2", "p3"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidFellerParams(f"{name} must be finite and nonnegative")
        if self.p4.cemetery:
            raise InvalidFellerParams("p4 cannot charge the cemetery")
        if self.p1 + self.p2 + self.p3 + self.p4.wedge_mass() <= 0:
            raise InvalidFellerParams("all parameters vanish")

    @property
    def total(self) -> float:
        return self.p1 + self.p2 + self.p3 + self.p4.wedge_mass()

    def normalized(self) -> FellerParams:
        s = 1.0 / self.total
        return FellerParams(self.p1 * s, self.p2 * s, self.p3 * s, self.p4.scaled(s))

    @property
    def jump_mass(self) -> float:
        return self.p4.total_mass

    @property
    def is_killed_bm(self) -> bool:
        return self.p2 == 0 and self.p3 == 0 and self.p4.empty

    @property
    def is_minimal(self) -> bool:
        return self.p2 == 0 and self.p4.empty

    @property
    def is_doob(self) -> bool:
        return self.p2 == 0 and self.p3 > 0 and not self.p4.empty and not self.p4.truncated

    @property
    def is_feller(self) -> bool:
        """False only for p2 = p3 = 0 with a finite nonempty jump measure."""
        return not (self.p2 == 0 and self.p3 == 0 and not self.p4.empty
                    and not self.p4.truncated)


@dataclass(frozen=True)
class ChainParams:
    gamma: float
    beta: float
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu_truncated: bool = False
    nu_tail: float = 0.0
    minimal: bool = False

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float).reshape(-1).copy()
        if self.gamma < 0 or self.beta < 0 or np.any(nu < 0):
            raise InvalidChainParams("gamma, beta and nu must be nonnegative")
        if not self.minimal and self.beta == 0 and not np.any(nu > 0) and not self.nu_truncated:
            raise InvalidChainParams("|nu| + beta must be nonzero for a non-minimal chain")
        nu.setflags(write=False)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def minimal_marker(cls, gamma: float = 0.0) -> ChainParams:
        return cls(gamma, 0.0, np.zeros(0), minimal=True)

    @property
    def nu_mass(self) -> float:
        return float(math.fsum(self.nu))

    @property
    def is_doob(self) -> bool:
        return not self.minimal and self.beta == 0 and not self.nu_truncated

    def total(self, emb: StateEmbedding) -> float:
        k = np.arange(self.nu.size)
        return self.gamma + self.beta + float(
            math.fsum(np.minimum(emb.c_hat[k], 1.0) * self.nu))

    def normalized(self, emb: StateEmbedding) -> ChainParams:
        if self.minimal:
            return self
        s = 1.0 / self.total(emb)
        return replace(self, gamma=self.gamma * s, beta=self.beta * s, nu=self.nu * s,
                       nu_tail=self.nu_tail * s)

    def nu_measure(self, emb: StateEmbedding) -> AtomicMeasure:
        """nu pushed to the embedded coordinates, sum_n nu_n delta_{c_hat_n}."""
        idx = np.flatnonzero(self.nu > 0)
        return AtomicMeasure(emb.c_hat[idx], self.nu[idx], truncated=self.nu_truncated,
                             trunc_index=int(idx[-1]) if idx.size and self.nu_truncated else None,
                             tail_bound=self.nu_tail)


def allocate_jump_measure(p4: AtomicMeasure, emb: StateEmbedding) -> np.ndarray:
    """Level weights frak_p_n from the jump measure by linear interpolation
    between neighbouring embedded states."""
    c_hat = emb.c_hat
    L = c_hat.size
    out = np.zeros(L)
    rev = c_hat[::-1]
    for x, w in zip(p4.locations, p4.weights):
        if x > c_hat[0]:
            out[0] += w
            continue
        # n with c_hat[n+1] < x <= c_hat[n]
        n = L - 1 - int(np.searchsorted(rev, x, side="left"))
        if n >= L - 1:
            raise AtomBelowTruncation(
                f"atom at {x!r} lies below c_hat[{L - 1}] = {c_hat[-1]!r}")
        if x == c_hat[n]:
            out[n] += w
            continue
        t = (x - c_hat[n + 1]) / (c_hat[n] - c_hat[n + 1])
        wn = w * t
        out[n] += wn
        out[n + 1] += w - wn
    return out


def _trim(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(v)
    return v[: nz[-1] + 1] if nz.size else v[:0]


def chain_from_feller(fp: FellerParams, emb: StateEmbedding) -> ChainParams:
    """(gamma, beta, nu) = (p1, 2 p2, frak_p)."""
    if fp.is_minimal:
        if fp.p3 > 0:
            warnings.warn("parameters describe the minimal process", MinimalCase, stacklevel=2)
        return ChainParams.minimal_marker(fp.p1)
    nu = _trim(allocate_jump_measure(fp.p4, emb))
    return ChainParams(fp.p1, 2.0 * fp.p2, nu, nu_truncated=fp.p4.truncated,
                       nu_tail=fp.p4.tail_bound)


def b1_series(ss: ScaleSpeed, nu: np.ndarray) -> tuple[float, bool]:
    """sum_k nu_k sum_{j>=k} dc_j sum_{i<=j} mu_i with a convergence flag."""
    r_terms = ss.dc * np.cumsum(ss.mu)
    ok, tail, _ = _geometric_tail(r_terms)
    tails = np.cumsum(r_terms[::-1])[::-1] + (tail if ok else math.inf)
    k = min(nu.size, tails.size)
    if np.any(nu[k:] > 0):
        return math.inf, False
    terms = nu[:k] * tails[:k]
    val = float(math.fsum(terms))
    return val, ok and math.isfinite(val)


def validate_chain(cp: ChainParams, ss: ScaleSpeed) -> None:
    if cp.minimal:
        return
    if cp.beta > 0 and ss.boundary_class == BoundaryClass.EXIT:
        raise InvalidChainParams("beta must vanish at an exit boundary")
    if ss.boundary_class == BoundaryClass.OTHER:
        raise InvalidChainParams("the boundary admits only the minimal process")
    _, ok = b1_series(ss, cp.nu)
    if not ok:
        raise InvalidChainParams("the nu-weighted series diverges")


def feller_from_chain(cp: ChainParams, emb: StateEmbedding,
                      ss: ScaleSpeed | None = None) -> FellerParams:
    if ss is not None:
        validate_chain(cp, ss)
    if cp.minimal:
        return FellerParams(0.0, 0.0, 1.0)
    if cp.nu.size > emb.n_levels:
        raise InvalidChainParams("nu extends beyond the embedded levels")
    p4 = cp.nu_measure(emb)
    if cp.is_doob:
        s = cp.gamma + p4.wedge_mass()
        if s < 1.0:
            return FellerParams(cp.gamma, 0.0, 1.0 - s, p4)
        k = 0.5 / s
        return FellerParams(cp.gamma * k, 0.0, 0.5, p4.scaled(k))
    return FellerParams(cp.gamma, cp.beta / 2.0, 0.0, p4).normalized()
