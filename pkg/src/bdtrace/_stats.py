"""Sample statistics with compensated summation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSamples


def _fsum_axis0(x: np.ndarray) -> np.ndarray:
    if x.ndim == 1:
        return np.array(math.fsum(x))
    flat = x.reshape(x.shape[0], -1)
    return np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])]).reshape(x.shape[1:])


def mc_stats(samples) -> tuple:
    """(mean, SE, (lo, hi) 95% interval) over axis 0."""
    x = np.asarray(samples, float)
    n = x.shape[0] if x.ndim else 0
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    mean = _fsum_axis0(x) / n
    var = _fsum_axis0((x - mean) ** 2) / (n - 1)
    se = np.sqrt(var / n)
    if mean.ndim == 0:
        mean, se = float(mean), float(se)
    half = 1.96 * se
    return mean, se, (mean - half, mean + half)


@dataclass(frozen=True)
class ResolventEstimate:
    """MC resolvent entries on an (alpha, j) grid for one start level i."""

    value: np.ndarray
    se: np.ndarray
    n_paths: int
    fingerprint: dict
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    secondary: np.ndarray | None = None
    secondary_se: np.ndarray | None = None
    status_counts: dict = field(default_factory=dict)
    single: np.ndarray | None = None
    single_se: np.ndarray | None = None
