from __future__ import annotations

import pytest

from bdtrace import AtomicMeasure, FellerParams, compute_scale_speed, q_geo, state_embedding
from bdtrace.bd_core import truncated_power_measure


@pytest.fixture(scope="session")
def Q():
    return q_geo(60)


@pytest.fixture(scope="session")
def Q400():
    return q_geo(400)


@pytest.fixture(scope="session")
def ss(Q):
    return compute_scale_speed(Q)


@pytest.fixture(scope="session")
def ss400(Q400):
    return compute_scale_speed(Q400)


@pytest.fixture(scope="session")
def emb(ss):
    return state_embedding(ss)


@pytest.fixture(scope="session")
def emb400(ss400):
    return state_embedding(ss400)


def delta(x: float, w: float = 1.0) -> AtomicMeasure:
    return AtomicMeasure.from_pairs([(x, w)])


REFLECTING = FellerParams(0.0, 1.0, 0.0)
KILLED = FellerParams(1.0, 0.0, 0.0)
MIXED = FellerParams(0.2, 0.3, 0.1, delta(0.4))
JUMPY = FellerParams(0.2, 0.3, 0.0, delta(0.4))


def pure_jump(emb) -> FellerParams:
    return FellerParams(0.0, 0.0, 0.0, truncated_power_measure(emb, 20)).normalized()
