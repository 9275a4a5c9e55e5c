"""Two-part long-stay model.

Part 1 is a weighted logistic regression for ``Pr(y >= threshold)``; part 2 a
weighted negative-binomial regression fitted only to the long stays (no
truncation correction). Both share the phase + month design. The long-stay
contribution to nights per booking is ``Pr(long) * E[y | long]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import special

from .glm import GlmFit, build_design, design_from_table, fit_logistic, fit_negbin
from .ingest import BookingTable, DataError, Phase

__all__ = [
    "LONG_STAY_THRESHOLD",
    "HurdleFit",
    "ImpactRow",
    "Decomposition",
    "fit_hurdle",
    "prevalence",
    "conditional_mean",
    "phase_summary",
    "impact_rows",
    "combined_impact",
    "empirical_decomposition",
]

LONG_STAY_THRESHOLD = 28


@dataclass(frozen=True)
class HurdleFit:
    logit_part: GlmFit
    nb_part: GlmFit
    threshold: int
    # booking weight per (phase code, month) cell, shape (3, 12)
    cell_mass: np.ndarray

    @property
    def converged(self) -> bool:
        return self.logit_part.converged and self.nb_part.converged


def _cell_row(phase: Phase, month: int) -> np.ndarray:
    return build_design([phase.code], [month]).X[0]


def fit_hurdle(table: BookingTable, threshold: int = LONG_STAY_THRESHOLD) -> HurdleFit:
    y = table.nights
    w = table.weights
    long = y >= threshold
    if not np.any(long):
        raise DataError(f"no stays of {threshold}+ nights: the long-stay part cannot be fitted")
    if np.all(long):
        raise DataError(f"every stay is {threshold}+ nights: the logistic part has a single class")
    design = design_from_table(table)
    logit = fit_logistic(design, long.astype(float), w)
    long_design = design_from_table(table.subset(long))
    nb = fit_negbin(long_design, y[long], w[long])
    mass = np.zeros((3, 12))
    np.add.at(mass, (table.phase.astype(int), table.month.astype(int) - 1), w)
    return HurdleFit(logit, nb, int(threshold), mass)


def prevalence(fit: HurdleFit, phase: Phase, month: int) -> float:
    return float(special.expit(_cell_row(phase, month) @ fit.logit_part.coefficients))


def conditional_mean(fit: HurdleFit, phase: Phase, month: int) -> float:
    return float(math.exp(_cell_row(phase, month) @ fit.nb_part.coefficients))


def phase_summary(fit: HurdleFit, phase: Phase) -> tuple[float, float]:
    """Phase-level (prevalence, conditional mean): cell predictions averaged over
    months with the phase's booking weight per month."""
    mass = fit.cell_mass[phase.code]
    if mass.sum() <= 0:
        raise ValueError(f"no bookings in phase {phase.value}")
    months = np.flatnonzero(mass > 0) + 1
    wts = mass[months - 1] / mass.sum()
    prev = sum(wt * prevalence(fit, phase, m) for wt, m in zip(wts, months))
    cmean = sum(wt * conditional_mean(fit, phase, m) for wt, m in zip(wts, months))
    return float(prev), float(cmean)


@dataclass(frozen=True)
class ImpactRow:
    phase: Phase
    prevalence: float
    conditional_mean: float
    contribution: float
    excess_vs_reference: float


def impact_rows(values: Mapping[Phase, tuple[float, float]], reference: Phase = Phase.PRE_COVID) -> list[ImpactRow]:
    """Long-stay nights per booking for each phase and its excess over ``reference``.

    ``values`` maps each phase to (prevalence, conditional mean).
    """
    if reference not in values:
        raise ValueError(f"reference phase {reference.value} missing")
    ref_prev, ref_mean = values[reference]
    ref = ref_prev * ref_mean
    rows = []
    for phase in Phase:
        if phase not in values:
            continue
        p, m = values[phase]
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"prevalence {p} outside [0, 1]")
        c = p * m
        rows.append(ImpactRow(phase, p, m, c, c - ref))
    return rows


def combined_impact(fit: HurdleFit, reference: Phase = Phase.PRE_COVID) -> list[ImpactRow]:
    values = {p: phase_summary(fit, p) for p in Phase if fit.cell_mass[p.code].sum() > 0}
    return impact_rows(values, reference)


@dataclass(frozen=True)
class Decomposition:
    share_long: float
    mean_long: float
    share_short: float
    mean_short: float
    total_mean: float

    @property
    def recombined(self) -> float:
        return self.share_long * self.mean_long + self.share_short * self.mean_short


def empirical_decomposition(y, w, threshold: int = LONG_STAY_THRESHOLD) -> Decomposition:
    """Model-free split of the weighted mean into long and short stays."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    long = y >= threshold
    W = math.fsum(w)
    wl = math.fsum(w[long])
    ws = math.fsum(w[~long])
    sl = math.fsum(w[long] * y[long])
    ss = math.fsum(w[~long] * y[~long])
    return Decomposition(
        share_long=wl / W,
        mean_long=sl / wl if wl > 0 else 0.0,
        share_short=ws / W,
        mean_short=ss / ws if ws > 0 else 0.0,
        total_mean=math.fsum(w * y) / W,
    )
