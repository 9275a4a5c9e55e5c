"""Booking-weighted moments and quantiles.

Weights are frequency weights. The variance is the population form
``sum(w * (y - mean)**2) / sum(w)``; quantiles invert the right-continuous
weighted ECDF without interpolation, so integer data give integer quantiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import BookingTable, Phase

__all__ = [
    "WeightedSample",
    "PhaseDescriptives",
    "weighted_mean",
    "weighted_variance",
    "weighted_sd",
    "weighted_quantile",
    "phase_descriptives",
]


@dataclass(frozen=True)
class WeightedSample:
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if v.size == 0:
            raise ValueError("empty sample")
        if v.size != w.size:
            raise ValueError(f"values and weights differ in length ({v.size} != {w.size})")
        if not np.all(w > 0):
            raise ValueError("weights must be strictly positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)


def _sample(values, weights) -> WeightedSample:
    if isinstance(values, WeightedSample):
        return values
    return WeightedSample(values, weights)


def weighted_mean(values, weights=None) -> float:
    s = _sample(values, weights)
    return math.fsum(s.weights * s.values) / math.fsum(s.weights)


def weighted_variance(values, weights=None) -> float:
    s = _sample(values, weights)
    mean = weighted_mean(s)
    return math.fsum(s.weights * (s.values - mean) ** 2) / math.fsum(s.weights)


def weighted_sd(values, weights=None) -> float:
    return math.sqrt(weighted_variance(values, weights))


def weighted_quantile(values, weights=None, p: float = 0.5) -> float:
    """Smallest value ``y`` with weighted ECDF ``F(y) >= p``, for ``0 < p <= 1``."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"probability must lie in (0, 1], got {p}")
    s = _sample(values, weights)
    order = np.argsort(s.values, kind="stable")
    v = s.values[order]
    cum = np.cumsum(s.weights[order])
    target = p * cum[-1]
    idx = int(np.searchsorted(cum, target, side="left"))
    return float(v[min(idx, v.size - 1)])


@dataclass(frozen=True)
class PhaseDescriptives:
    phase: Phase
    mean: float
    median: float
    p25: float
    p75: float
    sd: float
    total_weight: int


def phase_descriptives(table: BookingTable) -> list[PhaseDescriptives]:
    """Per-phase weighted mean, quartiles and standard deviation; empty phases are omitted."""
    out = []
    for phase in Phase:
        sel = table.phase == phase.code
        if not np.any(sel):
            continue
        s = WeightedSample(table.nights[sel], table.weights[sel])
        out.append(
            PhaseDescriptives(
                phase=phase,
                mean=weighted_mean(s),
                median=weighted_quantile(s, p=0.5),
                p25=weighted_quantile(s, p=0.25),
                p75=weighted_quantile(s, p=0.75),
                sd=weighted_sd(s),
                total_weight=int(table.weights[sel].sum()),
            )
        )
    return out
