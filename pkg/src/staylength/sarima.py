"""Regression with (0,1,1)(0,1,1)_s errors for the monthly mean series.

The response and the exogenous columns are both differenced by
``(1 - B)(1 - B**s)``. The differenced errors follow the moving average

    w_t = (1 + theta B)(1 + Theta B**s) e_t,     e_t ~ N(0, sigma2),

whose covariance is banded. The exact Gaussian likelihood comes from the
banded Cholesky (innovations) factorisation of that covariance. Regression
coefficients and ``sigma2`` are profiled out in closed form (GLS), so the
numerical search runs over the two MA parameters only, mapped through
``tanh`` to stay inside the invertible region.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .optim import minimize_quasi_newton

__all__ = [
    "SEASON",
    "MonthlySeries",
    "SarimaFit",
    "LRTest",
    "LjungBox",
    "DiagnosticsReport",
    "difference",
    "ma_polynomial",
    "ma_autocovariance",
    "exact_loglik",
    "exact_loglik_differenced",
    "fit_sarima",
    "fit_differenced",
    "information_criteria",
    "lr_test",
    "lr_test_values",
    "acf",
    "ljung_box",
    "residual_diagnostics",
    "BoundaryWarning",
]

SEASON = 12
BOUNDARY = 0.999
# tanh(7.6) = 1 - 5e-7: keeps the search off the exact unit root
_ATANH_LIMIT = 7.6


class BoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MonthlySeries:
    values: np.ndarray
    start: str
    xreg: np.ndarray | None = None
    xreg_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", v)
        if self.xreg is not None:
            x = np.asarray(self.xreg, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != v.size:
                raise ValueError("xreg rows must match the series length")
            object.__setattr__(self, "xreg", x)
            if not self.xreg_names:
                object.__setattr__(self, "xreg_names", tuple(f"x{i}" for i in range(x.shape[1])))
        if not np.all(np.isfinite(v)):
            raise ValueError("series contains non-finite values")

    def __len__(self):
        return self.values.size

    @property
    def months(self) -> list[str]:
        start = np.datetime64(self.start, "M")
        return [str(start + i) for i in range(self.values.size)]


def difference(x, d: int = 1, D: int = 1, s: int = SEASON) -> np.ndarray:
    """Apply ``(1 - B)**d (1 - B**s)**D`` along the first axis."""
    x = np.asarray(x, dtype=float)
    if d not in (0, 1) or D not in (0, 1):
        raise ValueError("d and D must be 0 or 1")
    if x.shape[0] <= d + D * s:
        raise ValueError(f"series of length {x.shape[0]} is too short for d={d}, D={D}, s={s}")
    if D:
        x = x[s:] - x[:-s]
    if d:
        x = x[1:] - x[:-1]
    return x


def ma_polynomial(theta: float, Theta: float, s: int = SEASON) -> np.ndarray:
    """Coefficients of ``(1 + theta B)(1 + Theta B**s)``."""
    psi = np.zeros(s + 2)
    psi[0] = 1.0
    psi[1] = theta
    psi[s] = Theta
    psi[s + 1] = theta * Theta
    return psi


def ma_autocovariance(theta: float, Theta: float, sigma2: float = 1.0, s: int = SEASON) -> np.ndarray:
    """Autocovariances gamma(0..s+1) of the differenced error process."""
    psi = ma_polynomial(theta, Theta, s)
    q = psi.size - 1
    return sigma2 * np.array([np.dot(psi[: q + 1 - h], psi[h:]) for h in range(q + 1)])


def _banded_factor(theta, Theta, n, s=SEASON):
    """Lower banded Cholesky factor of the unit-variance MA covariance."""
    g = ma_autocovariance(theta, Theta, 1.0, s)
    q = g.size - 1
    ab = np.zeros((q + 1, n))
    for h in range(q + 1):
        ab[h, : n - h] = g[h]
    return linalg.cholesky_banded(ab, lower=True), q


def _whiten(L, q, v):
    return linalg.solve_banded((q, 0), L, v)


def exact_loglik_differenced(theta, Theta, beta, sigma2, w, Xd=None, s: int = SEASON) -> float:
    """Exact log-likelihood of already differenced data ``w = Xd beta + MA errors``."""
    w = np.asarray(w, dtype=float)
    z = w if Xd is None or np.size(beta) == 0 else w - np.asarray(Xd, dtype=float) @ np.asarray(beta, dtype=float)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    try:
        L, q = _banded_factor(theta, Theta, z.size, s)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(f"MA covariance not positive definite at theta={theta}, Theta={Theta}") from exc
    e = _whiten(L, q, z)
    logdet = 2.0 * np.sum(np.log(L[0]))
    n = z.size
    return -0.5 * (n * math.log(2.0 * math.pi * sigma2) + logdet + float(e @ e) / sigma2)


def exact_loglik(theta, Theta, beta, sigma2, series: MonthlySeries, *, drift: bool = False,
                 s: int = SEASON) -> float:
    """Exact log-likelihood of ``series`` after ``(1-B)(1-B**s)`` differencing of
    the values and the exogenous columns."""
    w, Xd, _ = _differenced_problem(series, series.xreg is not None, drift, s)
    return exact_loglik_differenced(theta, Theta, beta, sigma2, w, Xd, s)


def _differenced_problem(series: MonthlySeries, include_xreg: bool, drift: bool, s: int):
    w = difference(series.values, 1, 1, s)
    cols = []
    names = []
    if include_xreg:
        if series.xreg is None:
            raise ValueError("series has no exogenous regressors")
        cols.append(difference(series.xreg, 1, 1, s))
        names.extend(series.xreg_names)
    if drift:
        cols.append(np.ones((w.size, 1)))
        names.append("drift")
    Xd = np.column_stack(cols) if cols else np.zeros((w.size, 0))
    return w, Xd, names


@dataclass(frozen=True)
class SarimaFit:
    ma1: float
    sma: float
    beta: np.ndarray
    beta_names: tuple[str, ...]
    sigma2: float
    loglik: float
    n: int
    residuals: np.ndarray
    se: dict[str, float]
    converged: bool
    season: int = SEASON
    start: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def n_params(self) -> int:
        # two MA terms, the regression coefficients and sigma2
        return 2 + self.beta.size + 1

    @property
    def aic(self) -> float:
        return information_criteria(self.loglik, self.n_params, self.n)["aic"]

    @property
    def aicc(self) -> float:
        return information_criteria(self.loglik, self.n_params, self.n)["aicc"]

    @property
    def bic(self) -> float:
        return information_criteria(self.loglik, self.n_params, self.n)["bic"]

    @property
    def at_boundary(self) -> bool:
        return max(abs(self.ma1), abs(self.sma)) > BOUNDARY

    def coefficient_table(self) -> list[tuple[str, float, float]]:
        rows = [("ma1", self.ma1, self.se.get("ma1", math.nan)), ("sma1", self.sma, self.se.get("sma1", math.nan))]
        rows += [(name, float(b), self.se.get(name, math.nan)) for name, b in zip(self.beta_names, self.beta)]
        rows.append(("sigma2", self.sigma2, self.se.get("sigma2", math.nan)))
        return rows


def information_criteria(loglik: float, k: int, n: int) -> dict[str, float]:
    """AIC, AICc and BIC; ``k`` counts every estimated parameter including sigma2."""
    aic = 2.0 * k - 2.0 * loglik
    aicc = aic + 2.0 * k * (k + 1) / (n - k - 1) if n - k - 1 > 0 else math.inf
    bic = k * math.log(n) - 2.0 * loglik
    return {"aic": aic, "aicc": aicc, "bic": bic}


def _profile(theta, Theta, w, Xd, s):
    """GLS for beta and sigma2 at fixed MA parameters; returns (loglik, beta, sigma2, e, L)."""
    n = w.size
    L, q = _banded_factor(theta, Theta, n, s)
    ew = _whiten(L, q, w)
    if Xd.shape[1]:
        eX = _whiten(L, q, Xd)
        beta, *_ = np.linalg.lstsq(eX, ew, rcond=None)
        e = ew - eX @ beta
    else:
        beta = np.zeros(0)
        e = ew
    sigma2 = float(e @ e) / n
    logdet = 2.0 * np.sum(np.log(L[0]))
    ll = -0.5 * (n * math.log(2.0 * math.pi * sigma2) + logdet + n)
    return ll, beta, sigma2, e, L


def _numeric_hessian(f, x, steps):
    k = x.size
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        for j in range(i, k):
            if i == j:
                xp = x.copy()
                xm = x.copy()
                xp[i] += steps[i]
                xm[i] -= steps[i]
                H[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / steps[i] ** 2
            else:
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    xx = x.copy()
                    xx[i] += si * steps[i]
                    xx[j] += sj * steps[j]
                    vals.append(f(xx))
                H[i, j] = H[j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * steps[i] * steps[j])
    return H


_DEFAULT_STARTS = ((0.0, 0.0), (-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5))


def fit_differenced(
    w,
    Xd=None,
    names: Sequence[str] = (),
    *,
    s: int = SEASON,
    starts: Sequence[tuple[float, float]] = _DEFAULT_STARTS,
    start: str = "",
) -> SarimaFit:
    """Maximum-likelihood fit of ``w = Xd beta + (1 + theta B)(1 + Theta B**s) e``."""
    w = np.asarray(w, dtype=float)
    Xd = np.zeros((w.size, 0)) if Xd is None else np.asarray(Xd, dtype=float).reshape(w.size, -1)
    names = tuple(names) if names else tuple(f"x{i}" for i in range(Xd.shape[1]))
    if w.size < s + 2:
        raise ValueError(f"need at least {s + 2} differenced observations, got {w.size}")
    n = w.size

    def objective(u):
        return -_profile(math.tanh(u[0]), math.tanh(u[1]), w, Xd, s)[0] / n

    box = [(-_ATANH_LIMIT, _ATANH_LIMIT)] * 2
    best = None
    for t0, T0 in starts:
        res = minimize_quasi_newton(objective, [math.atanh(t0), math.atanh(T0)], bounds=box)
        if best is None or res.fun < best.fun - 1e-12:
            best = res
    theta, Theta = math.tanh(best.x[0]), math.tanh(best.x[1])
    ll, beta, sigma2, e, L = _profile(theta, Theta, w, Xd, s)

    # standard errors from the observed information of the full likelihood
    pnames = ["ma1", "sma1", *names, "sigma2"]
    full = np.concatenate([[theta, Theta], beta, [sigma2]])

    def negll(p):
        return -exact_loglik_differenced(p[0], p[1], p[2:-1], p[-1], w, Xd, s)

    steps = np.array([1e-4, 1e-4, *([1e-4] * beta.size), 1e-4 * sigma2])
    # keep the probe for a boundary MA term on the invertible side
    for i in (0, 1):
        steps[i] = min(steps[i], max(1e-7, 0.5 * (1.0 - abs(full[i]))))
    warnings = []
    try:
        H = _numeric_hessian(negll, full, steps)
        cov = np.linalg.inv(H)
        diag = np.diag(cov)
        se = {nm: (math.sqrt(v) if v > 0 else math.nan) for nm, v in zip(pnames, diag)}
    except (np.linalg.LinAlgError, ValueError):
        se = {nm: math.nan for nm in pnames}
        warnings.append("observed information is singular; standard errors unavailable")
    if max(abs(theta), abs(Theta)) > BOUNDARY:
        msg = (f"MA estimate on the invertibility boundary (ma1={theta:.4f}, sma1={Theta:.4f}); "
               "its standard error is not reliable")
        warnings.append(msg)
        _warnings.warn(msg, BoundaryWarning, stacklevel=2)
    resid = e * math.sqrt(sigma2)
    return SarimaFit(
        ma1=theta,
        sma=Theta,
        beta=beta,
        beta_names=names,
        sigma2=sigma2,
        loglik=ll,
        n=n,
        residuals=resid,
        se=se,
        converged=bool(best.converged),
        season=s,
        start=start,
        warnings=warnings,
    )


def fit_sarima(series: MonthlySeries, include_xreg: bool = True, *, drift: bool = False,
               s: int = SEASON) -> SarimaFit:
    """Fit ARIMA(0,1,1)(0,1,1)_s with (optionally) the exogenous dummies.

    The first residual corresponds to month ``start + s + 1``.
    """
    w, Xd, names = _differenced_problem(series, include_xreg, drift, s)
    first = str(np.datetime64(series.start, "M") + s + 1) if series.start else ""
    return fit_differenced(w, Xd, names, s=s, start=first)


@dataclass(frozen=True)
class LRTest:
    statistic: float
    dof: int
    p_value: float


def lr_test_values(loglik_full: float, loglik_null: float, dof: int) -> LRTest:
    if loglik_full < loglik_null - 1e-9:
        raise ValueError("full model log-likelihood is below the null model: models are not nested")
    stat = max(0.0, 2.0 * (loglik_full - loglik_null))
    return LRTest(stat, int(dof), float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0)


def lr_test(full: SarimaFit, null: SarimaFit) -> LRTest:
    if full.n != null.n:
        raise ValueError("models were fitted to series of different length")
    return lr_test_values(full.loglik, null.loglik, full.n_params - null.n_params)


def acf(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelations at lags 1..max_lag (biased denominator)."""
    x = np.asarray(x, dtype=float)
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom <= 0:
        raise ValueError("autocorrelation undefined for a constant series")
    return np.array([float(xc[k:] @ xc[:-k]) / denom for k in range(1, max_lag + 1)])


@dataclass(frozen=True)
class LjungBox:
    lag: int
    statistic: float
    dof: int
    p_value: float


def ljung_box(residuals, max_lag: int, fitdf: int = 0) -> LjungBox:
    """``Q = n(n+2) sum_k r_k**2/(n-k)`` referred to chi2 with ``max_lag - fitdf`` dof."""
    x = np.asarray(residuals, dtype=float)
    n = x.size
    if max_lag <= fitdf:
        raise ValueError("max_lag must exceed fitdf")
    if n <= max_lag:
        raise ValueError(f"need more than {max_lag} residuals, got {n}")
    xc = x - x.mean()
    if not np.any(xc):
        return LjungBox(max_lag, 0.0, max_lag - fitdf, 1.0)
    r = acf(x, max_lag)
    q = n * (n + 2.0) * float(np.sum(r**2 / (n - np.arange(1, max_lag + 1))))
    dof = max_lag - fitdf
    return LjungBox(max_lag, q, dof, float(stats.chi2.sf(q, dof)))


@dataclass(frozen=True)
class DiagnosticsReport:
    acf: np.ndarray
    bound: float
    ljung_box: list[LjungBox]
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    @property
    def outside_bounds(self) -> int:
        return int(np.sum(np.abs(self.acf) > self.bound))


def residual_diagnostics(fit_or_residuals, max_lag: int = 24, lb_lags: Sequence[int] = (12, 24),
                         fitdf: int = 2) -> DiagnosticsReport:
    """ACF with +/-1.96/sqrt(n) bounds, Ljung-Box tests and a residual histogram."""
    r = np.asarray(getattr(fit_or_residuals, "residuals", fit_or_residuals), dtype=float)
    n = r.size
    if np.ptp(r) == 0:
        raise ValueError("residuals have zero variance")
    lag = min(max_lag, n - 1)
    lbs = [ljung_box(r, L, fitdf) for L in lb_lags if fitdf < L < n]
    counts, edges = np.histogram(r, bins="sturges")
    return DiagnosticsReport(acf(r, lag), 1.96 / math.sqrt(n), lbs, counts, edges)
