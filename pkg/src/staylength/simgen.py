"""Seeded synthetic bookings and monthly series with known parameters.

Random numbers come from NumPy's Philox4x64 counter-based generator. Each
simulated month uses its own stream keyed by ``(month_index << 64) | seed``,
so months are independent and can be produced in any order. Continuous and
count draws are inverse-CDF transforms of uniforms, so every draw consumes
exactly one uniform.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from datetime import date
from pathlib import Path

import numpy as np
from scipy import special, stats

from .ingest import DEFAULT_BOUNDARIES, STAY_CAP, BookingTable, PhaseBoundaries, _build, assign_phases
from .sarima import MonthlySeries

__all__ = [
    "BookingSimSpec",
    "SarimaSimSpec",
    "philox_stream",
    "simulate_bookings",
    "simulate_sarima",
    "simulate_nb_regression",
    "load_sim_spec",
    "dump_sim_spec",
]

_MASK64 = (1 << 64) - 1


def philox_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for sub-stream ``stream`` of ``seed``."""
    key = ((int(stream) & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def _zeros11():
    return (0.0,) * 11


@dataclass(frozen=True)
class BookingSimSpec:
    start: str = "2019-01"
    end: str = "2024-12"
    intensity: int = 20000
    seed: int = 20190101
    # short stays: discretized log-normal on [1, threshold-1]
    short_mu: float = 0.9
    short_sigma: float = 0.75
    short_post: float = 0.0
    short_pre: float = 0.0
    short_month: tuple[float, ...] = field(default_factory=_zeros11)
    # long-stay gate: logit of Pr(y >= threshold)
    alpha0: float = -3.51
    alpha_post: float = -0.30
    alpha_pre: float = -0.67
    alpha_month: tuple[float, ...] = field(default_factory=_zeros11)
    # long stays: mean exp(zeta'x), threshold + NB excess with dispersion theta
    zeta0: float = 3.752
    zeta_post: float = 0.072
    zeta_pre: float = 0.072
    zeta_month: tuple[float, ...] = field(default_factory=_zeros11)
    theta: float = 2.0
    threshold: int = 28
    cap: int = STAY_CAP
    pre_end: str = DEFAULT_BOUNDARIES.pre_end.isoformat()
    restr_end: str = DEFAULT_BOUNDARIES.restr_end.isoformat()

    def __post_init__(self):
        if self.intensity < 1:
            raise ValueError("intensity must be >= 1")
        if not (self.short_sigma > 0 and self.theta > 0):
            raise ValueError("dispersion parameters must be positive")
        for name in ("short_month", "alpha_month", "zeta_month"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 11:
                raise ValueError(f"{name} needs 11 values (February-December)")
            object.__setattr__(self, name, vals)
        if not 1 < self.threshold <= self.cap:
            raise ValueError("threshold must lie in (1, cap]")
        if math.exp(self.zeta0 + min(0.0, self.zeta_post, self.zeta_pre) + min((0.0, *self.zeta_month))) <= self.threshold:
            raise ValueError("long-stay mean must exceed the threshold in every cell")

    @property
    def boundaries(self) -> PhaseBoundaries:
        return PhaseBoundaries(date.fromisoformat(self.pre_end), date.fromisoformat(self.restr_end))


def _cell_effect(base, post, pre, month_eff, phase_codes, months):
    out = np.full(phase_codes.shape, float(base))
    out += np.where(phase_codes == 2, post, 0.0)
    out += np.where(phase_codes == 0, pre, 0.0)
    m = np.asarray((0.0, *month_eff))
    return out + m[months - 1]


def _month_draws(spec: BookingSimSpec, month: np.datetime64, index: int, boundaries: PhaseBoundaries):
    gen = philox_stream(spec.seed, index)
    n = spec.intensity
    first = month.astype("datetime64[D]")
    ndays = int(((month + 1).astype("datetime64[D]") - first).astype(int))
    u = gen.random((4, n))
    created = first + np.minimum((u[0] * ndays).astype(np.int64), ndays - 1)
    phase = assign_phases(created, boundaries)
    mnum = np.full(n, int(month.astype(int) % 12 + 1))

    p_long = special.expit(_cell_effect(spec.alpha0, spec.alpha_post, spec.alpha_pre, spec.alpha_month, phase, mnum))
    long = u[1] < p_long

    # short: inverse CDF of a log-normal truncated to [0.5, threshold - 0.5), rounded
    mu_s = _cell_effect(spec.short_mu, spec.short_post, spec.short_pre, spec.short_month, phase, mnum)
    a = special.ndtr((math.log(0.5) - mu_s) / spec.short_sigma)
    b = special.ndtr((math.log(spec.threshold - 0.5) - mu_s) / spec.short_sigma)
    zs = special.ndtri(a + u[2] * (b - a))
    short_y = np.clip(np.floor(np.exp(mu_s + spec.short_sigma * zs) + 0.5), 1, spec.threshold - 1)

    # long: threshold + NB excess, so E[y | long] = exp(zeta'x)
    m_long = np.exp(_cell_effect(spec.zeta0, spec.zeta_post, spec.zeta_pre, spec.zeta_month, phase, mnum))
    excess_mean = m_long - spec.threshold
    th = spec.theta
    long_y = spec.threshold + stats.nbinom.ppf(u[3], th, th / (th + excess_mean))
    y = np.where(long, long_y, short_y)
    y = np.clip(y, 1, spec.cap).astype(np.int64)
    return y, created


def simulate_bookings(spec: BookingSimSpec) -> BookingTable:
    """Draw ``intensity`` bookings per month and collapse them to weighted rows."""
    months = np.arange(np.datetime64(spec.start, "M"), np.datetime64(spec.end, "M") + 1)
    if months.size == 0:
        raise ValueError("empty simulation window")
    boundaries = spec.boundaries
    ys, ds = [], []
    for i, m in enumerate(months):
        y, d = _month_draws(spec, m, i, boundaries)
        ys.append(y)
        ds.append(d)
    nights = np.concatenate(ys)
    created = np.concatenate(ds)
    return _build(nights, np.ones(nights.size, dtype=np.int64), created, cap=spec.cap,
                  boundaries=boundaries, source=f"simulated(seed={spec.seed})")


@dataclass(frozen=True)
class SarimaSimSpec:
    theta: float = -0.76
    Theta: float = -0.9
    beta_post: float = 0.062
    beta_pre: float = -1.17
    sigma2: float = 0.066
    n: int = 288
    pre_end_index: int = 120
    post_start_index: int = 135
    level: float = 4.0
    seed: int = 1
    start: str = "2000-01"
    season: int = 12

    def __post_init__(self):
        if not (abs(self.theta) < 1 and abs(self.Theta) < 1):
            raise ValueError("MA parameters must lie strictly inside (-1, 1)")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if self.n < 2 * self.season + 2:
            raise ValueError("series too short")
        if not 0 <= self.pre_end_index <= self.post_start_index <= self.n:
            raise ValueError("phase boundary indices out of order")


def simulate_sarima(spec: SarimaSimSpec) -> MonthlySeries:
    """Series with dummies ``[post, pre]`` and ARIMA(0,1,1)(0,1,1)_s errors.

    The first ``s + 1`` error levels are fixed at zero; the differenced
    errors are a stationary moving average of innovations
    ``sqrt(sigma2) * ndtri(u)`` that include ``s + 1`` pre-sample draws.
    """
    s = spec.season
    n = spec.n
    gen = philox_stream(spec.seed, 0)
    e = math.sqrt(spec.sigma2) * special.ndtri(gen.random(n + s + 1))
    m = s + 1  # offset of time 0 in e
    w = np.zeros(n)
    t = np.arange(s + 1, n)
    w[t] = e[m + t] + spec.theta * e[m + t - 1] + spec.Theta * e[m + t - s] + spec.theta * spec.Theta * e[m + t - s - 1]
    u = np.zeros(n)
    for t in range(s + 1, n):
        u[t] = w[t] + u[t - 1] + u[t - s] - u[t - s - 1]
    t = np.arange(n)
    post = (t >= spec.post_start_index).astype(float)
    pre = (t < spec.pre_end_index).astype(float)
    y = spec.level + spec.beta_post * post + spec.beta_pre * pre + u
    return MonthlySeries(y, spec.start, np.column_stack([post, pre]), ("post", "pre"))


def simulate_nb_regression(beta, theta: float, n: int, seed: int, *, stream: int = 0):
    """Draw ``n`` bookings over uniformly random (phase, month) cells with
    NB2 counts of mean ``exp(x'beta)``; returns collapsed ``(phases, months, y, w)``.

    ``beta`` follows the column order of :func:`staylength.glm.build_design`.
    """
    from .glm import build_design

    beta = np.asarray(beta, dtype=float)
    gen = philox_stream(seed, stream)
    u = gen.random((3, n))
    phases = np.minimum((u[0] * 3).astype(np.int64), 2)
    months = np.minimum((u[1] * 12).astype(np.int64), 11) + 1
    # 36 cells: evaluate the mean once per cell
    cell = phases * 12 + (months - 1)
    cp = np.repeat(np.arange(3), 12)
    cm = np.tile(np.arange(1, 13), 3)
    mu_cell = np.exp(build_design(cp, cm).X @ beta)
    mu = mu_cell[cell]
    y = stats.nbinom.ppf(u[2], theta, theta / (theta + mu)).astype(np.int64)
    key = (cell * 100000 + y)
    uniq, counts = np.unique(key, return_counts=True)
    ucell, uy = uniq // 100000, uniq % 100000
    return ucell // 12, ucell % 12 + 1, uy, counts


# -- spec files -------------------------------------------------------------------

def _coerce(value: str, default):
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(",") if v.strip())
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def load_sim_spec(path: str | os.PathLike, kind=BookingSimSpec, **overrides):
    """Read ``key = value`` lines (``#`` comments) into a spec dataclass."""
    defaults = kind()
    known = {f.name: getattr(defaults, f.name) for f in fields(kind)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            key, sep, val = line.partition(":")
        key = key.strip()
        if not sep or key not in known:
            raise ValueError(f"{path}:{lineno}: unrecognised line {raw!r}")
        values[key] = _coerce(val.strip(), known[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return kind(**values)


def dump_sim_spec(spec) -> str:
    lines = []
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
