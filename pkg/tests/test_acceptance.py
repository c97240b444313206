"""Acceptance criteria 1-10; each test prints one PASS/FAIL line."""

from __future__ import annotations

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import solve_banded

from bdtrace import (AtomicMeasure, BoundaryClass, ChainParams, FellerParams,
                     allocate_jump_measure, chain_from_feller, classify_boundary,
                     compute_scale_speed, q_geo, state_embedding)
from bdtrace.approx import (allocated_closed_form, estimate_chain_instant_dist,
                            estimate_instant_dist, lambda_from_feller, reconstruct_lambda,
                            recover_params, recovery_se, recursion_check, rho_reflecting)
from bdtrace.pathsim import SimConfig, wrong_order_demo
from bdtrace.resolvent import (KilledKernel, chain_bc_terms, phi_minimal, psi_chain,
                               residual_feller_bc, resolvent_identity_residual,
                               symmetry_residual)
from bdtrace.verify import (cross_validate, doob_holding_mc, hitting_distribution_mc,
                            hitting_probabilities, killed_laplace_mc, subordinator_laplace_mc)

from conftest import delta, pure_jump

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
CASE_III = FellerParams(0.2, 0.3, 0.1, delta(0.4))
FINITE_JUMP = FellerParams(0.2, 0.3, 0.0, delta(0.4))
PAIRS = [(i, j) for i in range(4) for j in range(4)]


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def test_criterion_01_closed_forms(report):
    t0 = time.perf_counter()
    ss = compute_scale_speed(q_geo(60))
    k = np.arange(51)
    dc = float(np.max(np.abs(ss.c[:51] - (1 - 2.0**-k))))
    dm = float(np.max(np.abs(ss.mu[:51] - 2.0**-k)))
    cls = classify_boundary(ss)
    dt = time.perf_counter() - t0
    ok = dc < 1e-12 and dm < 1e-12 and cls == BoundaryClass.REGULAR and dt < 1.0
    report(1, ok, f"max|dc|={dc:.1e} max|dmu|={dm:.1e} class={cls.value} {dt:.3f}s")
    assert ok


def test_criterion_02_allocation(report):
    t0 = time.perf_counter()
    emb = state_embedding(compute_scale_speed(q_geo(60)))
    p = allocate_jump_measure(delta(0.4), emb)
    exact = abs(p[1] - 0.6) < 1e-15 and abs(p[2] - 0.4) < 1e-15
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 10))
        m = AtomicMeasure.from_pairs(zip(rng.uniform(1e-4, 4.0, k), rng.uniform(0.01, 5.0, k)))
        worst = max(worst, abs(allocate_jump_measure(m, emb).sum() - m.total_mass))
    dt = time.perf_counter() - t0
    ok = exact and worst < 1e-12 and dt < 1.0
    report(2, ok, f"p=({float(p[1])!r}, {float(p[2])!r}) conservation={worst:.1e} {dt:.3f}s")
    assert ok


def _u_first_step(Q, alpha, N):
    """E_k exp(-alpha tau_N) from the first-step equations, rows divided by q_k."""
    q = Q.a[:N] + Q.b[:N]
    ab = np.zeros((3, N))
    ab[1] = 1 + alpha / q
    ab[0, 1:] = -Q.b[: N - 1] / q[: N - 1]
    ab[2, :-1] = -Q.a[1:N] / q[1:]
    rhs = np.zeros(N)
    rhs[-1] = Q.b[N - 1] / q[N - 1]
    return solve_banded((1, 1), ab, rhs)


def test_criterion_03_chain_suite(report):
    t0 = time.perf_counter()
    Q = q_geo(400)
    ss = compute_scale_speed(Q)
    N = 200
    chains = {"reflecting": ChainParams(0.0, 2.0, np.zeros(0)),
              "honest jump": ChainParams(0.0, 0.6, np.array([0.0, 0.6, 0.4])),
              "no jumps": ChainParams(0.2, 0.6, np.zeros(0)),
              "mixed": ChainParams(0.2, 0.6, np.array([0.0, 0.6, 0.4]))}
    mrs = {a: phi_minimal(Q, ss, a, N) for a in (0.5, 1.0, 2.0)}
    honest = sym = ident = bc = uid = 0.0
    h = np.zeros(N)
    h[0] = 1.0
    for a, mr in mrs.items():
        u = _u_first_step(Q, a, N)
        uid = max(uid, float(np.max(np.abs(u - (1 - a * mr.phi.sum(axis=1)))[:11])))
        for name, cp in chains.items():
            psi = psi_chain(mr, ss, cp)
            if cp.gamma == 0:
                honest = max(honest, float(np.max(np.abs(a * psi.sum(axis=1) - 1)[:11])))
            if cp.nu.size == 0:
                M = ss.mu[:N, None] * psi
                sym = max(sym, float(np.max(np.abs(M - M.T)[:11, :11])))
            bc = max(bc, chain_bc_terms(psi, ss, cp, h).residual)
    for cp in chains.values():
        p = {a: psi_chain(mr, ss, cp) for a, mr in mrs.items()}
        ident = max(ident, resolvent_identity_residual(p[0.5], p[2.0], 0.5, 2.0),
                    resolvent_identity_residual(p[1.0], p[2.0], 1.0, 2.0))
    dt = time.perf_counter() - t0
    ok = honest < 1e-8 and sym < 1e-8 and ident < 1e-6 and bc < 1e-4 and uid < 1e-10 and dt < 10
    report(3, ok, f"honesty={honest:.1e} symmetry={sym:.1e} identity={ident:.1e} "
                  f"boundary={bc:.1e} u={uid:.1e} {dt:.2f}s")
    assert ok


def test_criterion_04_feller_suite(report):
    t0 = time.perf_counter()
    k = KilledKernel(1.0)
    h = lambda y: math.exp(-y)
    regimes = {"reflecting": FellerParams(0, 1, 0), "elastic": FellerParams(0.5, 0.5, 0),
               "sticky-elastic": FellerParams(0.2, 0.3, 0.1),
               "finite-jump": FellerParams(0.2, 0.3, 0.1, delta(0.4))}
    bc = {n: residual_feller_bc(fp, k, h) for n, fp in regimes.items()}
    h2 = lambda y: math.exp(-2 * y)
    sym_cases = [(FellerParams(0, 1, 0), True), (FellerParams(0, 0.5, 0.5), True),
                 (FellerParams(0.3, 0.7, 0.2), True), (FellerParams(0.2, 0.3, 0.1, delta(0.4)), False)]
    sym_ok = True
    worst_sym, witness = 0.0, 0.0
    for fp, symmetric in sym_cases:
        r = symmetry_residual(fp, k, h, h2)
        if symmetric:
            worst_sym = max(worst_sym, r)
            sym_ok &= r < 1e-8
        else:
            witness = r
            sym_ok &= r > 1e-3
    g = KilledKernel(0.5).density(1.0, 1.0)
    dg = abs(g - (1 - math.exp(-2)))
    dt = time.perf_counter() - t0
    ok = max(bc.values()) < 1e-5 and sym_ok and dg < 1e-9 and dt < 10
    report(4, ok, f"max bc={max(bc.values()):.1e} symmetric={worst_sym:.1e} "
                  f"witness={witness:.2e} g0 err={dg:.1e} {dt:.2f}s")
    assert ok


def test_criterion_05_pathwise_laws(report):
    n = 100_000
    cfg = SimConfig(dt=1e-4, seed=5)
    p4 = AtomicMeasure.from_pairs([(0.4, 1.0), (1.5, 0.5)])
    checks = [killed_laplace_mc(0.5, 2.0, n, cfg)]
    checks += [subordinator_laplace_mc(0.3, p4, s, 1.0, n, cfg) for s in (0.5, 1.0, 2.0)]
    checks.append(doob_holding_mc(FellerParams(0.2, 0.0, 0.5, delta(0.4, 0.3)), n, cfg))
    ok = all(c.passed for c in checks) and abs(checks[0].exact - math.exp(-1)) < 1e-15
    report(5, ok, "; ".join(f"{c.name}: z={c.z:+.2f}" for c in checks))
    assert ok


def test_criterion_06_cross_validation(report):
    Q = q_geo(400)
    emb = state_embedding(compute_scale_speed(Q))
    cfg = SimConfig(dt=1e-4, seed=7)
    cases = {"i killed": FellerParams(1, 0, 0), "ii reflecting": FellerParams(0, 1, 0),
             "iii mixed": CASE_III, "iv pure jump": pure_jump(emb)}
    zs, ok = {}, True
    for name, fp in cases.items():
        rep = cross_validate(Q, fp, [0.5, 1.0], PAIRS, 20_000, cfg, case=name, N=200)
        zs[name] = rep.max_abs_z
        ok &= rep.passed
    neg = cross_validate(Q, CASE_III, [0.5, 1.0], [(1, 2), (1, 3)], 20_000, cfg,
                         beta_factor=1.0, N=200)
    ok &= neg.max_abs_z > 5
    detail = " ".join(f"{k}: max|z|={v:.2f}" for k, v in zs.items())
    report(6, ok, f"{detail}; negative control max|z|={neg.max_abs_z:.1f}")
    assert ok


def test_criterion_07_hitting(report):
    emb = state_embedding(compute_scale_speed(q_geo(60)))
    est = hitting_distribution_mc(FellerParams(0, 1, 0), 0.4, emb, 100_000,
                                  SimConfig(dt=1e-4, seed=7), n_levels=10)
    z = est.z_scores(hitting_probabilities(0.4, emb, 10))
    ok = bool(np.all(np.abs(z) < 3))
    report(7, ok, f"freq=({est.freq[1]:.5f}, {est.freq[2]:.5f}) max|z|={np.max(np.abs(z)):.2f}")
    assert ok


def test_criterion_08_approximation(report):
    emb = state_embedding(compute_scale_speed(q_geo(60)))
    cfg = SimConfig(dt=1e-4, seed=8)
    refl = [estimate_instant_dist(FellerParams(0, 1, 0), n, 2000, cfg, emb) for n in range(6)]
    delta_ok = all(e.mass(emb.c_hat[e.n]) == 1.0 for e in refl)

    ests = {n: estimate_instant_dist(FINITE_JUMP, n, 100_000, cfg, emb) for n in range(4)}
    rec_res = max(recursion_check(ests[a], ests[b], emb)
                  for a in range(4) for b in range(a + 1, min(a + 4, 4)))

    rec = reconstruct_lambda(ests, emb)
    got, truth = recover_params(rec), FINITE_JUMP.normalized()
    rel = max(abs(got.p1 - truth.p1) / truth.p1, abs(got.p2 - truth.p2) / truth.p2,
              abs(got.p4.total_mass - truth.p4.total_mass) / truth.p4.total_mass)

    lam = lambda_from_feller(FINITE_JUMP, emb)
    chain_z = 0.0
    for n in (1, 3, 6):
        ce = estimate_chain_instant_dist(FINITE_JUMP, n, 100_000, cfg, emb)
        cf, cc = allocated_closed_form(lam, emb, n)
        z = np.abs(np.append(ce.freq - cf, ce.cemetery - cc)) / np.maximum(
            np.append(ce.se, ce.cemetery_se), 1e-5)
        chain_z = max(chain_z, float(np.max(z)))

    med = [float(np.median(rho_reflecting(1.0, float(emb.c_hat[n]), 1000, 8, n)))
           for n in range(2, 13)]
    mono = all(b < a for a, b in zip(med, med[1:]))

    ok = delta_ok and rec_res < 3 and rel < 0.10 and chain_z < 3 and mono
    report(8, ok, f"delta={delta_ok} recursion={rec_res:.2f}SE recovery rel={rel:.3f} "
                  f"(p1={got.p1:.4f} p2={got.p2:.4f} |p4|={got.p4.total_mass:.4f}, "
                  f"se p2={recovery_se(rec)['p2']:.4f}) chain max z={chain_z:.2f} "
                  f"rho medians {med[0]:.2e}..{med[-1]:.2e} decreasing={mono}")
    assert ok


def test_criterion_09_wrong_order(report):
    Q = q_geo(60)
    ss = compute_scale_speed(Q)
    emb = state_embedding(ss)
    fp = FellerParams(0.0, 1.0, 0.0, delta(0.4, 4.0))
    res = wrong_order_demo(Q, fp, SimConfig(dt=1e-4, horizon=1.0, seed=1), emb, ss.mu,
                           n_paths=40)
    ok = res.fraction > 3 * res.se and res.correct_fraction == 0.0
    report(9, ok, f"wrong-order fraction={res.fraction:.3f} (se {res.se:.3f}), "
                  f"correct-order fraction={res.correct_fraction}")
    assert ok


def test_criterion_10_determinism(report, tmp_path):
    Q = q_geo(60)
    runs = [cross_validate(Q, CASE_III, [1.0], [(0, 0), (1, 2)], 600,
                           SimConfig(dt=1e-4, seed=10, threads=t), N=50) for t in (1, 3)]
    same_mc = all(a["mc"] == b["mc"] and a["se"] == b["se"]
                  for a, b in zip(runs[0].rows, runs[1].rows))
    outs = []
    for k, threads in enumerate(("1", "2")):
        d = tmp_path / f"run{k}"
        env = dict(os.environ, BD_TRACE_THREADS=threads)
        r = subprocess.run([sys.executable, "-m", "bdtrace.cli", "approx", "--config",
                            str(CONFIGS / "approx.yaml"), "--out-dir", str(d), "--paths", "600"],
                           env=env, capture_output=True, text=True)
        outs.append((r.returncode, d))
    files = sorted(p.name for p in outs[0][1].iterdir() if p.name != "metadata.json")
    same_files = all((outs[0][1] / f).read_bytes() == (outs[1][1] / f).read_bytes()
                     for f in files)
    ok = same_mc and same_files and len(files) >= 4
    report(10, ok, f"library rerun identical={same_mc}; cli outputs {files} identical={same_files}")
    assert ok
