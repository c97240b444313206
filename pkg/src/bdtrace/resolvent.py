"""Analytic resolvents on both sides: the chain matrices Phi and Psi, the
killed Brownian kernel, Feller's and Doob's Brownian resolvents, and the
residual checks for the boundary conditions and symmetry identities."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from .bd_core import AtomicMeasure, BirthDeathMatrix, ChainParams, FellerParams, ScaleSpeed
from .errors import (
    DimensionMismatch,
    QuadratureNotConverged,
    SingularSystem,
    TailNotConverged,
    ZeroDenominator,
)

Func = Callable[[float], float]


# ---------------------------------------------------------------- chain side

@dataclass(frozen=True)
class MinimalResolvent:
    alpha: float
    phi: np.ndarray
    u: np.ndarray
    one_minus_u: np.ndarray
    N: int
    trunc_err: float


def _phi_block(ss: ScaleSpeed, alpha: float, N: int) -> np.ndarray:
    # diag(mu) (alpha I - Q_N) is symmetric: mu_k b_k = 1/(2 dc_k) and
    # mu_k a_k = 1/(2 dc_{k-1})
    mu = ss.mu[:N]
    up = 0.5 / ss.dc[:N]
    down = np.zeros(N)
    down[1:] = 0.5 / ss.dc[: N - 1]
    ab = np.zeros((2, N))
    ab[1] = alpha * mu + up + down
    ab[0, 1:] = -up[: N - 1]
    try:
        return linalg.solveh_banded(ab, np.diag(mu), lower=False, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def phi_minimal(Q: BirthDeathMatrix, ss: ScaleSpeed, alpha: float, N: int) -> MinimalResolvent:
    """Minimal resolvent with the chain killed on reaching level N."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if N > Q.cap or N < 2:
        raise DimensionMismatch(f"N = {N} outside 2..cap = {Q.cap}")
    phi = _phi_block(ss, alpha, N)
    N2 = min(2 * N, Q.cap)
    err = float(np.max(np.abs(_phi_block(ss, alpha, N2)[:N, :N] - phi))) if N2 > N else math.nan
    one_minus_u = alpha * phi.sum(axis=1)
    u = 1.0 - one_minus_u
    for arr in (phi, u, one_minus_u):
        arr.setflags(write=False)
    return MinimalResolvent(float(alpha), phi, u, one_minus_u, N, err)


def psi_chain(mr: MinimalResolvent, ss: ScaleSpeed, cp: ChainParams,
              return_error: bool = False):
    """The (Q, gamma, beta, nu)-resolvent matrix at the truncation of ``mr``."""
    phi, u, N, alpha = mr.phi, mr.u, mr.N, mr.alpha
    if cp.minimal:
        return (phi.copy(), 0.0) if return_error else phi.copy()
    K = min(cp.nu.size, N)
    nu = cp.nu[:K]
    mu = ss.mu[:N]
    den = cp.gamma + float(nu @ mr.one_minus_u[:K]) + cp.beta * alpha * float(mu @ u)
    if not den > 0:
        raise ZeroDenominator("gamma + nu(1 - u) + beta alpha mu(u) vanishes")
    num = nu @ phi[:K, :] + cp.beta * mu * u
    psi = phi + np.outer(u, num) / den
    if return_error:
        # atoms beyond level N and the declared nu tail are bounded through
        # Phi_kj <= 1/alpha and 1 - u_k <= 1
        dropped = float(cp.nu[K:].sum()) + cp.nu_tail
        err = dropped * (1.0 / alpha) / den * (1 + float(np.max(num)) / den)
        if not math.isnan(mr.trunc_err):
            err += mr.trunc_err
        return psi, err
    return psi


def resolvent_identity_residual(psi_a: np.ndarray, psi_b: np.ndarray, alpha: float,
                                beta_: float) -> float:
    if psi_a.shape != psi_b.shape:
        raise DimensionMismatch(f"{psi_a.shape} vs {psi_b.shape}")
    if alpha == beta_:
        return float(np.max(np.abs(psi_a - psi_b)))
    r = psi_a - psi_b + (alpha - beta_) * (psi_a @ psi_b)
    return float(np.max(np.abs(r)))


def _neville_at_zero(x: np.ndarray, y: np.ndarray) -> float:
    p = np.array(y, dtype=float)
    n = len(x)
    for m in range(1, n):
        for i in range(n - m):
            p[i] = (x[i + m] * p[i] - x[i] * p[i + 1]) / (x[i + m] - x[i])
    return float(p[0])


@dataclass(frozen=True)
class ChainBCTerms:
    residual: float
    uncertainty: float
    F_inf: float
    Fplus_inf: float


def _tail_limit(x: np.ndarray, y: np.ndarray, hi: int, width: int) -> tuple[float, float]:
    a = _neville_at_zero(x[hi - width + 1: hi + 1], y[hi - width + 1: hi + 1])
    b = _neville_at_zero(x[hi - width: hi], y[hi - width: hi])
    return a, abs(a - b)


def chain_bc_terms(psi: np.ndarray, ss: ScaleSpeed, cp: ChainParams, h: np.ndarray,
                   window: int = 8, depth: float = 1e-5, tol: float = 1e-3) -> ChainBCTerms:
    N = psi.shape[0]
    h = np.asarray(h, dtype=float)
    if h.size != N:
        raise DimensionMismatch("h must have one entry per level")
    F = psi @ h
    Fp = np.diff(F) / ss.dc[: N - 1]
    c_hat = ss.c_hat[:N]
    x_mid = 0.5 * (c_hat[:-1] + c_hat[1:])
    # deepest level still well above rounding noise in the differences
    deep = np.flatnonzero(c_hat[: N - 1] >= depth * c_hat[0])
    hi = int(deep[-1]) if deep.size else -1
    if hi - window < 0:
        raise TailNotConverged("not enough resolved levels for the tail extrapolation")
    F_inf, dF = _tail_limit(c_hat, F, hi, window)
    Fp_inf, dFp = _tail_limit(x_mid, Fp, hi, window)
    scale = max(float(np.max(np.abs(F))), float(np.max(np.abs(Fp[: hi + 1]))), 1e-300)
    if not (math.isfinite(F_inf) and math.isfinite(Fp_inf)) or max(dF, dFp) > tol * scale:
        raise TailNotConverged(f"tail extrapolation unstable (dF={dF:.3g}, dF+={dFp:.3g})")
    K = min(cp.nu.size, N)
    jump = float(cp.nu[:K] @ (F_inf - F[:K])) if K else 0.0
    res = 0.5 * cp.beta * Fp_inf + jump + cp.gamma * F_inf
    unc = 0.5 * cp.beta * dFp + (cp.nu_mass + cp.gamma) * dF
    return ChainBCTerms(abs(res), unc, F_inf, Fp_inf)


def residual_chain_bc(psi: np.ndarray, ss: ScaleSpeed, cp: ChainParams, h: np.ndarray) -> float:
    return chain_bc_terms(psi, ss, cp, h).residual


# -------------------------------------------------------------- Brownian side

@dataclass(frozen=True)
class KilledKernel:
    """Resolvent density of Brownian motion killed at 0.

    ``x_max`` caps the integration range (use it for compactly supported h).
    """

    alpha: float
    rtol: float = 1e-9
    x_max: float = math.inf
    limit: int = 400

    @property
    def s(self) -> float:
        return math.sqrt(2.0 * self.alpha)

    def u_minus(self, x: float) -> float:
        return math.sinh(self.s * x)

    def u_plus(self, x: float) -> float:
        return math.exp(-self.s * x)

    @property
    def wronskian(self) -> float:
        return self.s / 2.0

    def density(self, x: float, y: float) -> float:
        if x <= 0 or y <= 0:
            return 0.0
        if self.alpha == 0:
            return 2.0 * min(x, y)
        s = self.s
        # (e^{-s|x-y|} - e^{-s(x+y)}) / s without cancellation near 0
        return math.exp(-s * abs(x - y)) * -math.expm1(-2.0 * s * min(x, y)) / s


def _quad(f: Func, a: float, b: float, rtol: float, limit: int) -> float:
    if b <= a:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, abserr, info = integrate.quad(f, a, b, epsrel=rtol * 0.1, epsabs=1e-14,
                                           limit=limit, full_output=1)[:3]
    if not math.isfinite(val) or abserr > max(rtol * abs(val), 1e-12):
        raise QuadratureNotConverged(
            f"quad on [{a}, {b}]: value {val!r}, error estimate {abserr!r}")
    return float(val)


def g0_potential(h: Func, x: float, x_max: float = math.inf, rtol: float = 1e-9,
                 limit: int = 400) -> float:
    """Potential of killed BM, 2 * int (x ^ y) h(y) dy."""
    if x <= 0:
        return 0.0
    lo = _quad(lambda y: y * h(y), 0.0, min(x, x_max), rtol, limit)
    hi = _quad(h, x, x_max, rtol, limit) if x < x_max else 0.0
    return 2.0 * (lo + x * hi)


def g0_apply(kernel: KilledKernel, h: Func, x: float) -> float:
    if kernel.alpha == 0:
        return g0_potential(h, x, kernel.x_max, kernel.rtol, kernel.limit)
    if x <= 0:
        return 0.0
    s = kernel.s
    xm = kernel.x_max
    # y < x: (2/s) e^{-sx} sinh(sy);  y > x: (2/s) sinh(sx) e^{-sy}
    lo = _quad(lambda y: math.exp(-s * (x - y)) * -math.expm1(-2 * s * y) * h(y),
               0.0, min(x, xm), kernel.rtol, kernel.limit)
    fac = -math.expm1(-2 * s * x)
    hi = _quad(lambda y: math.exp(-s * (y - x)) * h(y), x, xm, kernel.rtol,
               kernel.limit) if x < xm else 0.0
    return (lo + fac * hi) / s


def _laplace(kernel: KilledKernel, h: Func) -> float:
    s = kernel.s
    return _quad(lambda y: math.exp(-s * y) * h(y), 0.0, kernel.x_max, kernel.rtol, kernel.limit)


def _sup_estimate(h: Func, x_max: float) -> float:
    top = min(x_max, 50.0)
    return max(abs(h(float(y))) for y in np.linspace(0.0, top, 201))


@dataclass(frozen=True)
class FellerAtZero:
    value: float
    uncertainty: float
    g0_at_atoms: np.ndarray


def feller_resolvent_at_zero(fp: FellerParams, kernel: KilledKernel, h: Func) -> FellerAtZero:
    alpha = kernel.alpha
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s = kernel.s
    p4 = fp.p4
    g_atoms = np.array([g0_apply(kernel, h, float(x)) for x in p4.locations])
    num = (2.0 * fp.p2 * (_laplace(kernel, h) if fp.p2 else 0.0)
           + fp.p3 * h(0.0) + math.fsum(p4.weights * g_atoms))
    den = (fp.p1 + s * fp.p2 + alpha * fp.p3
           + math.fsum(p4.weights * -np.expm1(-s * p4.locations)))
    if not den > 0:
        raise ZeroDenominator("Feller resolvent denominator vanishes")
    value = num / den
    unc = 0.0
    if p4.truncated and p4.tail_bound > 0:
        hs = _sup_estimate(h, kernel.x_max)
        tau = p4.tail_bound
        unc = (hs * (s / alpha) * tau + abs(value) * s * tau) / den
    return FellerAtZero(value, unc, g_atoms)


def feller_resolvent(fp: FellerParams, kernel: KilledKernel, h: Func, x: float,
                     at_zero: FellerAtZero | None = None) -> float:
    if at_zero is None:
        at_zero = feller_resolvent_at_zero(fp, kernel, h)
    return g0_apply(kernel, h, x) + at_zero.value * math.exp(-kernel.s * x)


def doob_resolvent(lam: AtomicMeasure, kernel: KilledKernel, h: Func, x: float) -> float:
    """Killed BM restarted from ``lam`` at each hit of 0 (cemetery mass kills)."""
    mass = lam.total_mass + lam.cemetery
    if abs(mass - 1.0) > 1e-9:
        raise ValueError(f"lambda must be a probability distribution (mass {mass})")
    s = kernel.s
    base = g0_apply(kernel, h, x)
    if lam.locations.size == 0:
        return base
    g_atoms = np.array([g0_apply(kernel, h, float(y)) for y in lam.locations])
    corr = math.fsum(lam.weights * g_atoms)
    den = 1.0 - math.fsum(lam.weights * np.exp(-s * lam.locations))
    if not den > 0:
        raise ZeroDenominator("lambda returns without delay")
    return base + math.exp(-s * x) * corr / den


@dataclass(frozen=True)
class FellerBCTerms:
    residual: float
    f0: float
    df0: float
    d2f0: float
    d2f0_fd: float
    step: float


def feller_bc_terms(fp: FellerParams, kernel: KilledKernel, h: Func,
                    step: float | None = None) -> FellerBCTerms:
    at0 = feller_resolvent_at_zero(fp, kernel, h)
    # one-sided stencils; the step balances O(step^2) truncation against the
    # quadrature error (about 1e-2 rtol in practice) amplified by 1/step
    d = step if step is not None else (1e-2 * kernel.rtol) ** (1.0 / 3.0)
    f = [at0.value] + [feller_resolvent(fp, kernel, h, k * d, at0) for k in (1, 2, 3)]
    df0 = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * d)
    d2_fd = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / d ** 2
    d2 = 2.0 * (kernel.alpha * at0.value - h(0.0))
    s = kernel.s
    f_atoms = at0.g0_at_atoms + at0.value * np.exp(-s * fp.p4.locations)
    jump = math.fsum(fp.p4.weights * (at0.value - f_atoms))
    res = fp.p1 * f[0] - fp.p2 * df0 + 0.5 * fp.p3 * d2 + jump
    return FellerBCTerms(abs(res), f[0], df0, d2, d2_fd, d)


def residual_feller_bc(fp: FellerParams, kernel: KilledKernel, h: Func) -> float:
    return feller_bc_terms(fp, kernel, h).residual


def symmetric_measure_atom(fp: FellerParams) -> float:
    """Mass at 0 of the measure m = (p3 / 2 p2) delta_0 + Lebesgue."""
    return fp.p3 / (2.0 * fp.p2) if fp.p2 > 0 else 0.0


def symmetry_residual(fp: FellerParams, kernel: KilledKernel, h1: Func, h2: Func) -> float:
    s = kernel.s
    z1 = feller_resolvent_at_zero(fp, kernel, h1)
    z2 = feller_resolvent_at_zero(fp, kernel, h2)
    atom = symmetric_measure_atom(fp)
    xm = kernel.x_max

    def pair(zf: FellerAtZero, hf: Func, hg: Func) -> float:
        inner = _quad(lambda x: g0_apply(kernel, hf, x) * hg(x), 0.0, xm,
                      kernel.rtol, kernel.limit)
        edge = _quad(lambda x: math.exp(-s * x) * hg(x), 0.0, xm, kernel.rtol, kernel.limit)
        return atom * zf.value * hg(0.0) + inner + zf.value * edge

    return abs(pair(z1, h1, h2) - pair(z2, h2, h1))
