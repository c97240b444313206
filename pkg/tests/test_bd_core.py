from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdtrace import (AtomicMeasure, BoundaryClass, ChainParams, FellerParams,
                     allocate_jump_measure, build_matrix, chain_from_feller, classify_boundary,
                     compute_scale_speed, feller_from_chain, q_geo, state_embedding)
from bdtrace.bd_core import b1_series, geometric_matrix, truncated_power_measure
from bdtrace.errors import (AtomBelowTruncation, CapTooSmall, InfiniteScale, MinimalCase,
                            NonPositiveRate, TailDivergent)

from conftest import delta


def _direct_products(Q, k):
    """mu_k and c_k by plain products, as an independent oracle."""
    mu = [0.5]
    for i in range(1, k + 1):
        mu.append(mu[-1] * Q.b[i - 1] / Q.a[i])
    dc = [1.0 / (2.0 * m * Q.b[i]) for i, m in enumerate(mu)]
    return mu, np.concatenate(([0.0], np.cumsum(dc)))


def test_geo_matrix_echo(Q):
    assert Q.cap == 60
    assert Q.b[0] == 1.0 and Q.a[0] == 0.0
    assert Q.a[1] == 2.0 and Q.b[1] == 4.0 and Q.a[3] == 2 * 4.0**2


@pytest.mark.parametrize("bad, idx", [(1, 1), (5, 5)])
def test_nonpositive_rate(bad, idx):
    a = np.ones(10)
    a[0] = 0.0
    a[bad] = 0.0
    with pytest.raises(NonPositiveRate) as e:
        build_matrix(a, np.ones(10), 10)
    assert e.value.index == idx


def test_a0_must_vanish():
    a = np.ones(10)
    a[0] = 0.5
    with pytest.raises(ValueError):
        build_matrix(a, np.ones(10), 10)


def test_cap_too_small():
    with pytest.raises(CapTooSmall):
        build_matrix([0, 1], [1, 1], 2)


def test_scale_speed_closed_form(ss):
    k = np.arange(51)
    assert np.max(np.abs(ss.c[:51] - (1 - 2.0**-k))) < 1e-12
    assert np.max(np.abs(ss.mu[:51] - 2.0**-k)) < 1e-12
    assert ss.c[3] == pytest.approx(0.875, abs=1e-15)
    assert ss.mu[3] == pytest.approx(0.125, abs=1e-15)


def test_scale_speed_matches_direct_products(Q, ss):
    mu, c = _direct_products(Q, 30)
    # mu from products is 2^-k / 1; rescale to the library's mu_0 convention
    np.testing.assert_allclose(ss.mu[:31] / ss.mu[0], np.array(mu) / mu[0], rtol=1e-13)


def test_c_inf(ss):
    assert abs(ss.c_inf - 1.0) <= 2.0**-59 * 4


def test_constant_rates_diverge():
    n = 50
    with pytest.raises(TailDivergent) as e:
        compute_scale_speed(build_matrix(np.r_[0.0, np.ones(n - 1)], np.ones(n), n))
    assert e.value.scale_speed.c_inf == math.inf
    assert classify_boundary(e.value.scale_speed) == BoundaryClass.OTHER
    with pytest.raises(InfiniteScale):
        state_embedding(e.value.scale_speed)


def test_classify_geo(ss):
    assert classify_boundary(ss) == BoundaryClass.REGULAR


def test_classify_exit():
    # increments halve while mu_k grows like 2^k: R converges, S diverges
    n = 60
    k = np.arange(n, dtype=float)
    b = 4.0 ** k
    a = np.r_[0.0, 4.0 ** (k[1:] - 1) / 2.0]
    ss = compute_scale_speed(build_matrix(a, b, n))
    assert np.all(np.diff(ss.mu) > 0)
    assert classify_boundary(ss) == BoundaryClass.EXIT


def test_embedding(emb):
    assert emb.c_hat[2] == 0.25
    assert emb.level_of(0.25) == 2 and emb.point(2) == 0.25
    with pytest.raises(KeyError):
        emb.level_of(0.3)


@pytest.mark.parametrize("x, w, expect", [
    (0.4, 1.0, {1: 0.6, 2: 0.4}),
    (0.25, 2.5, {2: 2.5}),
    (2.0, 1.0, {0: 1.0}),
])
def test_allocation_examples(emb, x, w, expect):
    p = allocate_jump_measure(delta(x, w), emb)
    for n, v in expect.items():
        assert abs(p[n] - v) < 1e-15
    assert np.count_nonzero(p) == len(expect)


def test_allocation_below_truncation(emb):
    with pytest.raises(AtomBelowTruncation):
        allocate_jump_measure(delta(emb.c_hat[-1] / 2), emb)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 5.0), st.floats(1e-3, 10.0)), min_size=1,
                max_size=8, unique_by=lambda t: t[0]))
def test_allocation_conservation_and_locality(pairs):
    emb = state_embedding(compute_scale_speed(q_geo(60)))
    m = AtomicMeasure.from_pairs(pairs)
    p = allocate_jump_measure(m, emb)
    assert abs(p.sum() - m.total_mass) < 1e-12 * max(1.0, m.total_mass)
    ch = np.r_[np.inf, emb.c_hat]
    for n in np.flatnonzero(p):
        lo, hi = emb.c_hat[n + 1], ch[n]  # (c_{n+1}, c_{n-1})
        assert np.any((m.locations > lo) & (m.locations < hi))


def test_chain_from_feller_mixed(emb):
    fp = FellerParams(0.2, 0.3, 0.1, delta(0.4))
    assert fp.total == pytest.approx(1.0)
    cp = chain_from_feller(fp, emb)
    assert (cp.gamma, cp.beta) == (0.2, 0.6)
    np.testing.assert_allclose(cp.nu, [0.0, 0.6, 0.4], atol=1e-15)


def test_chain_from_feller_reflecting(emb):
    cp = chain_from_feller(FellerParams(0, 1, 0), emb)
    assert (cp.gamma, cp.beta, cp.nu.size) == (0, 2, 0)


def test_minimal_marker(emb):
    with pytest.warns(MinimalCase):
        cp = chain_from_feller(FellerParams(0, 0, 1), emb)
    assert cp.minimal
    fp = feller_from_chain(cp, emb)
    assert (fp.p1, fp.p2, fp.p3, fp.p4.empty) == (0, 0, 1, True)


def test_feller_from_chain_reflecting(emb):
    fp = feller_from_chain(ChainParams(0, 1, np.zeros(0)), emb)
    assert (fp.p1, fp.p2, fp.p3) == (0, 1, 0)


def test_feller_from_chain_doob(emb):
    fp = feller_from_chain(ChainParams(0.2, 0, np.array([0, 0.6, 0.4])), emb)
    assert fp.p2 == 0 and fp.p3 > 0
    np.testing.assert_array_equal(fp.p4.locations, emb.c_hat[[1, 2]])
    assert fp.total == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.lists(st.floats(0, 3), min_size=0, max_size=6))
def test_round_trip_up_to_scalar(gamma, beta, nu):
    emb = state_embedding(compute_scale_speed(q_geo(60)))
    nu = np.array(nu)
    if beta == 0 and not np.any(nu > 1e-9):
        return
    nu = np.where(nu > 1e-9, nu, 0.0)
    cp = ChainParams(gamma, beta, nu)
    back = chain_from_feller(feller_from_chain(cp, emb), emb)
    a = np.r_[cp.gamma, cp.beta, np.pad(cp.nu, (0, 8 - cp.nu.size))]
    b = np.r_[back.gamma, back.beta, np.pad(back.nu, (0, 8 - back.nu.size))]
    if back.beta == 0 and cp.beta == 0:
        b = b.copy()
    k = np.flatnonzero(a > 0)[0]
    s = b[k] / a[k]
    np.testing.assert_allclose(b, s * a, rtol=1e-10, atol=1e-12)


def test_truncated_power_tail(emb):
    m = truncated_power_measure(emb, 20)
    assert m.truncated and m.trunc_index == 20
    assert 0 < m.tail_bound < m.wedge_mass()


def test_b1_series_regular(ss):
    val, ok = b1_series(ss, np.array([0.0, 0.6, 0.4]))
    assert ok and math.isfinite(val)
    # brute force partial sum to the cap
    r = ss.dc * np.cumsum(ss.mu)
    brute = 0.6 * r[1:].sum() + 0.4 * r[2:].sum()
    assert val == pytest.approx(brute, rel=1e-6)


def test_geometric_matrix_default_is_geo():
    np.testing.assert_array_equal(geometric_matrix(60).a, q_geo(60).a)
