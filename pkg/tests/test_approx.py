from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdtrace import FellerParams
from bdtrace.approx import (InstantDistEstimate, RegimeNote, SurgerySchedule,
                            allocated_closed_form, c_transform, chain_approximant,
                            convergence_diagnostic, estimate_chain_instant_dist,
                            estimate_instant_dist, excursion_times, instant_dist_closed_form,
                            lambda_from_feller, p2_tilde_sequence, reconstruct_lambda,
                            recover_params, recovery_se, recursion_check, rho_reflecting,
                            sample_exit_time)
from bdtrace.errors import InconsistentEstimates, ScheduleOrderViolation
from bdtrace.pathsim import CEMETERY, SamplePath, SimConfig, simulate_feller_bm
from bdtrace.resolvent import KilledKernel, doob_resolvent
from bdtrace.timechange import accumulate_pcaf, trace_path

from conftest import JUMPY, KILLED, MIXED, REFLECTING, delta, pure_jump

CFG = SimConfig(dt=1e-4, seed=51)


def _grid_path(values, dt=0.1):
    v = np.asarray(values, float)
    return SamplePath(np.arange(v.size) * dt, v, np.zeros(v.size, np.uint8))


# ---------------------------------------------------------------- surgery

def test_schedule_validation():
    with pytest.raises(ScheduleOrderViolation):
        SurgerySchedule([0.5, 0.6], [0.7, 0.9])
    with pytest.raises(ScheduleOrderViolation):
        SurgerySchedule([0.5], [0.4])
    s = SurgerySchedule([0.1, 0.5], [0.3, 0.5])
    assert len(s) == 2 and s.discarded(1.0) == pytest.approx(0.2)


def test_empty_schedule_is_identity():
    p = _grid_path([0.3, 0.2, 0.1, 0.4])
    out, disc = c_transform(p, SurgerySchedule())
    assert disc == 0.0
    np.testing.assert_array_equal(out.values, p.values)
    np.testing.assert_array_equal(out.times, p.times)


def test_cut_and_splice():
    p = _grid_path([0.9, 0.5, 0.0, 0.2, 0.6, 0.8])
    out, disc = c_transform(p, SurgerySchedule([0.2], [0.4]))
    assert disc == pytest.approx(0.2)
    np.testing.assert_allclose(out.values, [0.9, 0.5, 0.6, 0.8])
    np.testing.assert_allclose(out.times, [0.0, 0.1, 0.2, 0.3])
    assert out.flags[2]  # splice marked as a jump


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=12, unique=True), st.integers(2, 60))
def test_surgery_preserves_duration(cuts, n):
    """Output duration plus discarded duration equals input duration."""
    pts = np.sort(np.array(cuts))
    if pts.size % 2:
        pts = pts[:-1]
    a, b = pts[0::2], pts[1::2]
    if np.any(a[1:] <= b[:-1]):
        return
    path = _grid_path(np.linspace(0, 1, n), dt=10.0 / (n - 1))
    out, disc = c_transform(path, SurgerySchedule(a, b))
    assert out.times[-1] + disc == pytest.approx(path.times[-1], abs=1e-12)
    assert np.all(np.diff(out.times) > 0)


def test_no_boundary_visit_gives_empty_schedule(emb):
    p = _grid_path([0.9, 0.8, 0.85, 0.7])
    assert len(excursion_times(p, emb, 1, eps=0.01)) == 0


def test_excursion_schedule_values(emb):
    p = _grid_path([0.9, 0.3, 0.0, 0.2, 0.6, 0.1, 0.0, 0.7, 0.2])
    s = excursion_times(p, emb, 1, eps=0.01)
    np.testing.assert_allclose(s.alpha, [0.2, 0.6])
    np.testing.assert_allclose(s.beta, [0.4, 0.7])


def test_sigma_monotone_in_level(emb):
    cfg = SimConfig(dt=1e-4, horizon=2.0, seed=3)
    for p in range(10):
        y, _ = simulate_feller_bm(REFLECTING, cfg, 0.0, p)
        coarse, fine = excursion_times(y, emb, 1), excursion_times(y, emb, 4)
        assert coarse.alpha[0] == fine.alpha[0]
        assert fine.beta[0] <= coarse.beta[0]


def test_conservative_sigmas_finite(emb):
    cfg = SimConfig(dt=1e-4, horizon=4.0, seed=4)
    for p in range(10):
        y, _ = simulate_feller_bm(FellerParams(0, 0.3, 0, delta(0.4)),
                                  cfg, 0.0, p)
        s = excursion_times(y, emb, 2)
        assert np.all(np.isfinite(s.beta[:-1]))
        assert np.all(s.beta[:-1] < y.lifetime)


def test_surgery_gives_doob_resolvent(emb):
    """Reflecting BM cut at level 1 is Doob's BM restarted at c_hat[1]."""
    alpha, x0 = 2.0, 0.5
    cfg = SimConfig(dt=1e-4, horizon=12.0, seed=61)
    f = lambda y: math.exp(-y)
    vals = []
    for p in range(400):
        y, _ = simulate_feller_bm(REFLECTING, cfg, x0, p)
        out, _ = c_transform(y, excursion_times(y, emb, 1))
        t, v = out.times[:-1], out.values[:-1]
        vals.append(math.fsum(np.exp(-alpha * t) * np.exp(-v) * np.diff(out.times)))
    vals = np.array(vals)
    m, se = vals.mean(), vals.std(ddof=1) / math.sqrt(vals.size)
    exact = doob_resolvent(delta(float(emb.c_hat[1])), KilledKernel(alpha), f, x0)
    assert abs(m - exact) < 3 * se


# ------------------------------------------------ instantaneous distributions

@pytest.mark.parametrize("n", [0, 2, 5])
def test_reflecting_instant_is_point_mass(n, emb):
    est = estimate_instant_dist(REFLECTING, n, 2000, CFG, emb)
    assert est.mass(emb.c_hat[n]) == 1.0 and est.cemetery == 0
    assert est.total == pytest.approx(1.0)


def test_killed_has_no_instant_distribution(emb):
    assert isinstance(estimate_instant_dist(KILLED, 1, 10, CFG, emb), RegimeNote)


@pytest.fixture(scope="module")
def jumpy_est(emb):
    cfg = SimConfig(dt=1e-4, seed=71)
    return {n: estimate_instant_dist(JUMPY, n, 20000, cfg, emb) for n in range(4)}


def test_instant_support(jumpy_est, emb):
    for n, est in jumpy_est.items():
        assert np.all(est.locations >= emb.c_hat[n])
        assert est.total == pytest.approx(1.0)


def test_instant_matches_closed_form(jumpy_est, emb):
    lam = lambda_from_feller(JUMPY, emb)
    for n, est in jumpy_est.items():
        cf = instant_dist_closed_form(lam, emb, n)
        for x, w in zip(cf.locations, cf.weights):
            assert abs(est.mass(x) - w) < 3 * max(math.sqrt(w * (1 - w) / est.n_paths), 1e-4)
        assert abs(est.cemetery - cf.cemetery) < 3 * est.cemetery_se


def test_recursion_identity_and_reflecting(emb, jumpy_est):
    assert recursion_check(jumpy_est[1], jumpy_est[1], emb) == 0.0
    r1, r3 = (estimate_instant_dist(REFLECTING, n, 500, CFG, emb) for n in (1, 3))
    assert recursion_check(r1, r3, emb) < 3


@pytest.mark.parametrize("n, m", [(0, 1), (0, 3), (1, 2), (1, 3), (2, 3)])
def test_recursion_projective(jumpy_est, emb, n, m):
    assert recursion_check(jumpy_est[n], jumpy_est[m], emb) < 3


# ------------------------------------------------------------- reconstruction

def test_reconstruct_reflecting(emb):
    ests = [estimate_instant_dist(REFLECTING, n, 500, CFG, emb) for n in range(4)]
    rec = reconstruct_lambda(ests, emb)
    assert rec.cemetery == 0 and np.all(rec.weights == 0)
    assert rec.p2_tilde == emb.c_hat[0]
    for n in range(4):
        assert rec.h[n] == pytest.approx(emb.c_hat[0])
    fp = recover_params(rec)
    assert (fp.p1, fp.p2, fp.p3, fp.p4.total_mass) == (0, 1, 0, 0)


def test_reconstruct_jumpy(jumpy_est, emb):
    rec = reconstruct_lambda(jumpy_est, emb)
    truth = JUMPY.normalized()
    fp = recover_params(rec)
    se = recovery_se(rec)
    assert abs(fp.p1 - truth.p1) < 3 * se["p1"] + 1e-3
    assert abs(fp.p2 - truth.p2) < 3 * se["p2"] + 1e-3
    # p2_tilde^n decreases in n within SE
    hs = [rec.h[n] for n in range(4)]
    ss = [rec.h_se[n] for n in range(4)]
    for k in range(3):
        assert hs[k + 1] <= hs[k] + 3 * math.hypot(ss[k], ss[k + 1])
    for n in range(4):
        assert 0 < rec.Lambda[n] <= 1
        assert abs(1 / rec.Lambda[n] - rec.inverse_Lambda(n, emb.c_hat)) < \
            3 * rec.Lambda_se[n] / rec.Lambda[n] ** 2 + 1e-9


def test_inconsistent_levels_raise(emb):
    c = emb.c_hat
    a = InstantDistEstimate(0, c[0], np.array([2.0, c[0]]), np.array([0.5, 0.5]),
                            np.array([0.005, 0.005]), 0.0, 0.0, 10000)
    b = InstantDistEstimate(1, c[1], np.array([2.0, c[1]]), np.array([0.1, 0.9]),
                            np.array([0.003, 0.003]), 0.0, 0.0, 10000)
    with pytest.raises(InconsistentEstimates):
        reconstruct_lambda([a, b], emb)


def test_pure_jump_recovers_no_killing(emb):
    fp = pure_jump(emb)
    cfg = SimConfig(dt=1e-4, seed=81)
    rec = reconstruct_lambda([estimate_instant_dist(fp, n, 3000, cfg, emb) for n in range(2)],
                             emb)
    assert recover_params(rec).p1 < 3 * max(rec.cemetery_se, 1e-12)


def test_recovery_scale_free(emb):
    """Scaling the parameters leaves lambda and the re-entry law unchanged."""
    lam1 = lambda_from_feller(JUMPY, emb)
    big = FellerParams(3 * JUMPY.p1, 3 * JUMPY.p2, 0.0, delta(0.4, 3.0))
    lam3 = lambda_from_feller(big, emb)
    np.testing.assert_allclose(lam3.weights, lam1.weights, rtol=1e-14)
    assert lam3.cemetery == pytest.approx(lam1.cemetery, rel=1e-14)
    a = estimate_instant_dist(JUMPY, 1, 10000, SimConfig(seed=1), emb)
    b = estimate_instant_dist(big, 1, 10000, SimConfig(seed=2), emb)
    for x in emb.c_hat[:2]:
        assert abs(a.mass(x) - b.mass(x)) < 3 * math.hypot(a.se.max(), b.se.max())


def test_lambda_normalization(emb):
    lam = lambda_from_feller(JUMPY, emb)
    assert lam.weights[0] == pytest.approx(1.0 / 0.9)
    assert lam.cemetery == pytest.approx(0.2 / 0.9)
    h = p2_tilde_sequence(lam, emb, 5)
    assert h[0] == pytest.approx(1 - 0.2 / 0.9)
    assert h[2] == pytest.approx(0.3 / 0.9)  # p2 scaled by the same constant once c_hat < 0.4
    assert np.all(np.diff(h) <= 1e-15)


# ------------------------------------------------------------- chain side

def test_allocated_closed_form_spot(emb):
    lam = lambda_from_feller(JUMPY, emb)
    for n in (2, 5, 10):
        lv, cem = allocated_closed_form(lam, emb, n)
        L = 1 / (lam.cemetery + lam.weights[0] + p2_tilde_sequence(lam, emb, n)[n] / emb.c_hat[n])
        assert lv[1] / L == pytest.approx(0.6 * lam.weights[0], rel=1e-12)
        assert lv.sum() + cem == pytest.approx(1.0, rel=1e-12)


def test_chain_entry_matches_closed_form(emb):
    lam = lambda_from_feller(JUMPY, emb)
    est = estimate_chain_instant_dist(JUMPY, 2, 20000, SimConfig(seed=91), emb)
    lv, cem = allocated_closed_form(lam, emb, 2)
    assert est.total == pytest.approx(1.0)
    assert np.all(np.abs(est.freq - lv) < 3 * np.maximum(est.se, 1e-4))
    assert abs(est.cemetery - cem) < 3 * est.cemetery_se


def test_chain_approximant_on_traces(emb, ss):
    cfg = SimConfig(dt=1e-5, eps=4e-3, horizon=1.0, seed=7)
    levels = emb.c_hat[emb.c_hat >= 4 * cfg.bandwidth]
    traces = []
    for p in range(20):
        y, led = simulate_feller_bm(JUMPY, cfg, 0.0, p, levels=levels)
        traces.append(trace_path(y, accumulate_pcaf(led, ss.mu, levels.size, emb), emb,
                                 cfg.bandwidth))
    paths, est = chain_approximant(traces, emb, 2)
    assert est.n_samples > 0
    assert est.total == pytest.approx(1.0)
    for tr, pa in zip(traces, paths):
        assert pa.chain_times.size <= tr.chain_times.size
        assert np.all(np.diff(pa.chain_times) >= 0)


def test_sojourn_does_not_change_trace(emb, ss):
    """Traces with and without p3 coincide on common random numbers."""
    cfg = SimConfig(dt=1e-5, eps=4e-3, horizon=0.5, seed=5)
    levels = emb.c_hat[emb.c_hat >= 4 * cfg.bandwidth]
    for p in range(8):
        tr = []
        for p3 in (0.0, 0.3):
            y, led = simulate_feller_bm(FellerParams(0.2, 0.3, p3, delta(0.4)), cfg, 0.0, p,
                                        levels=levels)
            tr.append(trace_path(y, accumulate_pcaf(led, ss.mu, levels.size, emb), emb,
                                 cfg.bandwidth))
        a, b = tr
        np.testing.assert_array_equal(a.levels, b.levels)
        np.testing.assert_allclose(a.chain_times, b.chain_times, atol=1e-9)


# ------------------------------------------------------------- convergence

def test_exit_time_mean():
    x = sample_exit_time(np.random.default_rng(0), 200000)
    assert abs(x.mean() - 1.0) < 3 * x.std() / math.sqrt(x.size)


def test_rho_decreasing_and_small(emb):
    med = [np.median(rho_reflecting(1.0, float(emb.c_hat[n]), 400, 3, n)) for n in (2, 6, 12)]
    assert med[0] > med[1] > med[2]
    assert med[2] < 10 * 1e-4


def test_convergence_warns_for_sojourn(emb):
    with pytest.warns(UserWarning):
        convergence_diagnostic(MIXED, 0.2, [1], 2, SimConfig(dt=1e-4, seed=1), emb)


def test_convergence_sup_distance(emb):
    rows = convergence_diagnostic(REFLECTING, 1.0, [1, 3, 5], 200, SimConfig(dt=1e-4, seed=2),
                                  emb, n_grid_paths=30)
    sup = [r["sup_diff_median"] for r in rows]
    assert sup[0] > sup[1] > sup[2]
    assert all(r["n_rho"] == 200 for r in rows)
