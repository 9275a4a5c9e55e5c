"""Weighted maximum-likelihood fits of stay-length densities.

Three two-parameter families are supported: log-normal and Gamma (continuous
densities evaluated at the integer stay lengths) and the discrete
Poisson-lognormal. Fits are compared by AIC/BIC with the booking count
``sum(w)`` as the BIC sample size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .optim import minimize_nelder_mead, minimize_quasi_newton

__all__ = [
    "LogNormal",
    "Gamma",
    "PoissonLogNormal",
    "FAMILIES",
    "DensityFit",
    "RankedFit",
    "PLNQuadratureError",
    "pln_log_pmf",
    "weighted_loglik",
    "fit_weighted",
    "fit_lognormal_closed_form",
    "rank_models",
    "overlay_points",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class PLNQuadratureError(ArithmeticError):
    pass


# -- Poisson-lognormal pmf ----------------------------------------------------

@lru_cache(maxsize=None)
def _hermite(n: int):
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, np.log(w)


def _pln_log_integrand(z, k, mu, sigma, lgk):
    eta = mu + sigma * z
    return k * eta - np.exp(eta) - lgk - 0.5 * z * z - _LOG_SQRT_2PI


def _pln_mode(k, mu, sigma):
    """Mode of the log integrand in z, by safeguarded Newton on its derivative."""
    k = np.asarray(k, dtype=float)
    zk = np.where(k > 0, (np.log(np.maximum(k, 1.0)) - mu) / sigma, -sigma * math.exp(mu))
    lo = np.minimum(0.0, zk)
    hi = np.maximum(0.0, zk)
    z = 0.5 * (lo + hi)
    for _ in range(100):
        e = np.exp(mu + sigma * z)
        g = k * sigma - sigma * e - z
        h = -sigma * sigma * e - 1.0
        lo = np.where(g > 0, z, lo)
        hi = np.where(g < 0, z, hi)
        step = z - g / h
        inside = (step > lo) & (step < hi)
        z_new = np.where(inside, step, 0.5 * (lo + hi))
        if np.all(np.abs(z_new - z) <= 1e-14 * (1.0 + np.abs(z))):
            z = z_new
            break
        z = z_new
    curv = sigma * sigma * np.exp(mu + sigma * z) + 1.0
    return z, curv


def _pln_gh(k, mu, sigma, lgk, zhat, scale, n):
    x, logw = _hermite(n)
    z = zhat[:, None] + scale[:, None] * x[None, :]
    terms = _pln_log_integrand(z, k[:, None], mu, sigma, lgk[:, None]) + x[None, :] ** 2 + logw[None, :]
    return np.log(scale) + special.logsumexp(terms, axis=1)


def _pln_adaptive(k, mu, sigma, lgk, zhat, scale):
    out = np.empty(k.size)
    for i in range(k.size):
        peak = _pln_log_integrand(zhat[i], k[i], mu, sigma, lgk[i])

        def f(z, i=i, peak=peak):
            return math.exp(_pln_log_integrand(z, k[i], mu, sigma, lgk[i]) - peak)

        a, b = zhat[i] - 40.0 * scale[i], zhat[i] + 40.0 * scale[i]
        val, err = integrate.quad(f, a, b, points=[zhat[i]], epsabs=0.0, epsrel=1e-12, limit=400)
        if not val > 0 or err > 1e-9 * val:
            raise PLNQuadratureError(
                f"adaptive quadrature failed for k={k[i]}, mu={mu}, sigma={sigma}: value={val}, abserr={err}"
            )
        out[i] = peak + math.log(val)
    return out


def pln_log_pmf(k, mu: float, sigma: float, *, nodes: int = 40, tol: float = 1e-9, max_nodes: int = 1280):
    """Log pmf of the Poisson-lognormal distribution.

    ``log of  integral Poisson(k; exp(mu + sigma*z)) phi(z) dz`` by Gauss-Hermite
    quadrature centred on the integrand's mode and scaled by its curvature.
    The node count doubles until successive estimates agree to ``tol``;
    sigma > 3 goes straight to adaptive quadrature.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    scalar = np.ndim(k) == 0
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise ValueError("k must be non-negative integers")
    lgk = special.gammaln(k + 1.0)
    zhat, curv = _pln_mode(k, mu, sigma)
    scale = np.sqrt(2.0 / curv)
    if sigma > 3.0:
        out = _pln_adaptive(k, mu, sigma, lgk, zhat, scale)
        return float(out[0]) if scalar else out

    n = nodes
    prev = _pln_gh(k, mu, sigma, lgk, zhat, scale, n)
    pending = np.arange(k.size)
    out = prev.copy()
    while pending.size:
        n *= 2
        if n > max_nodes:
            raise PLNQuadratureError(
                f"Gauss-Hermite did not settle for k={k[pending].tolist()} (mu={mu}, sigma={sigma}) "
                f"with up to {max_nodes} nodes"
            )
        cur = _pln_gh(k[pending], mu, sigma, lgk[pending], zhat[pending], scale[pending], n)
        done = np.abs(cur - prev[pending]) < tol
        out[pending] = cur
        prev[pending] = cur
        pending = pending[~done]
    return float(out[0]) if scalar else out


# -- families -------------------------------------------------------------------

@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float
    name = "lognormal"
    label = "Log-normal"
    n_params = 2

    def logpdf(self, y):
        ly = np.log(np.asarray(y, dtype=float))
        return -ly - math.log(self.sigma) - _LOG_SQRT_2PI - 0.5 * ((ly - self.mu) / self.sigma) ** 2

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return special.ndtr((np.log(y) - self.mu) / self.sigma)

    @property
    def params(self) -> dict[str, float]:
        return {"mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class Gamma:
    shape: float
    rate: float
    name = "gamma"
    label = "Gamma"
    n_params = 2

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        k, lam = self.shape, self.rate
        return k * math.log(lam) - special.gammaln(k) + (k - 1.0) * np.log(y) - lam * y

    def cdf(self, y):
        return special.gammainc(self.shape, self.rate * np.asarray(y, dtype=float))

    @property
    def params(self) -> dict[str, float]:
        return {"shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class PoissonLogNormal:
    mu: float
    sigma: float
    name = "pln"
    label = "Poisson-lognormal"
    n_params = 2

    def logpdf(self, y):
        return pln_log_pmf(y, self.mu, self.sigma)

    def cdf(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=int))
        top = int(y.max())
        pmf = np.exp(pln_log_pmf(np.arange(top + 1), self.mu, self.sigma))
        return np.minimum(np.cumsum(pmf)[y], 1.0)

    @property
    def params(self) -> dict[str, float]:
        return {"mu": self.mu, "sigma": self.sigma}


FAMILIES = {"lognormal": LogNormal, "gamma": Gamma, "pln": PoissonLogNormal}


def _aggregate(y, w):
    """Collapse to distinct values with summed weights (sufficient statistics)."""
    y = np.asarray(y, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if y.size == 0 or y.size != w.size:
        raise ValueError("need equally long, non-empty values and weights")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    uniq, inv = np.unique(y, return_inverse=True)
    return uniq, np.bincount(inv, weights=w)


def weighted_loglik(family, y, w) -> float:
    """``sum_i w_i log f(y_i | theta)``."""
    uniq, wsum = _aggregate(y, w)
    if np.any(uniq < 1):
        raise ValueError("stay lengths must be >= 1")
    lp = np.asarray(family.logpdf(uniq), dtype=float)
    bad = ~np.isfinite(lp)
    if np.any(bad):
        raise FloatingPointError(f"non-finite log density at y={uniq[bad][0]:g} under {family}")
    return math.fsum(wsum * lp)


# -- fitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class DensityFit:
    family: LogNormal | Gamma | PoissonLogNormal
    loglik: float
    n_eff: float
    converged: bool
    iterations: int

    @property
    def k(self) -> int:
        return self.family.n_params

    @property
    def aic(self) -> float:
        return 2.0 * self.k - 2.0 * self.loglik

    @property
    def bic(self) -> float:
        return self.k * math.log(self.n_eff) - 2.0 * self.loglik

    @property
    def name(self) -> str:
        return self.family.name


def _weighted_moments(uniq, wsum):
    W = wsum.sum()
    mean = float(np.dot(wsum, uniq) / W)
    var = float(np.dot(wsum, (uniq - mean) ** 2) / W)
    return mean, var


def fit_lognormal_closed_form(y, w) -> LogNormal:
    """Weighted mean and population variance of ``log y``."""
    uniq, wsum = _aggregate(y, w)
    ly = np.log(uniq)
    mu = math.fsum(wsum * ly) / math.fsum(wsum)
    var = math.fsum(wsum * (ly - mu) ** 2) / math.fsum(wsum)
    if var <= 0:
        raise ValueError("log-normal fit is degenerate: all stay lengths are identical")
    return LogNormal(mu, math.sqrt(var))


_LOG_BOUND = 30.0


def _fit_lognormal(uniq, wsum):
    W = wsum.sum()
    ly = np.log(uniq)
    m1 = np.dot(wsum, ly) / W
    m2 = np.dot(wsum, ly * ly) / W
    mean, var = _weighted_moments(uniq, wsum)
    s2 = math.log1p(var / mean**2)
    x0 = np.array([math.log(mean) - s2 / 2.0, 0.5 * math.log(s2)])

    def nll(p):
        mu, ls = p
        s2 = math.exp(2.0 * ls)
        return m1 + ls + _LOG_SQRT_2PI + (m2 - 2.0 * mu * m1 + mu * mu) / (2.0 * s2)

    def grad(p):
        mu, ls = p
        s2 = math.exp(2.0 * ls)
        q = m2 - 2.0 * mu * m1 + mu * mu
        return np.array([(mu - m1) / s2, 1.0 - q / s2])

    res = minimize_quasi_newton(nll, x0, grad, bounds=[(None, None), (-_LOG_BOUND, _LOG_BOUND)])
    return LogNormal(float(res.x[0]), math.exp(res.x[1])), res


def _fit_gamma(uniq, wsum):
    W = wsum.sum()
    my = np.dot(wsum, uniq) / W
    mly = np.dot(wsum, np.log(uniq)) / W
    mean, var = _weighted_moments(uniq, wsum)
    x0 = np.array([math.log(mean**2 / var), math.log(mean / var)])

    def nll(p):
        k, lam = math.exp(p[0]), math.exp(p[1])
        return -(k * p[1] - special.gammaln(k) + (k - 1.0) * mly - lam * my)

    def grad(p):
        k, lam = math.exp(p[0]), math.exp(p[1])
        dk = p[1] - special.digamma(k) + mly
        dlam = k / lam - my
        return -np.array([dk * k, dlam * lam])

    box = [(-_LOG_BOUND, _LOG_BOUND)] * 2
    res = minimize_quasi_newton(nll, x0, grad, bounds=box)
    return Gamma(math.exp(res.x[0]), math.exp(res.x[1])), res


def _fit_pln(uniq, wsum):
    W = wsum.sum()
    mean, var = _weighted_moments(uniq, wsum)
    s2 = math.log1p(max(var - mean, 0.05 * mean) / mean**2)
    x0 = np.array([math.log(mean) - s2 / 2.0, 0.5 * math.log(s2)])
    k = uniq.astype(float)

    def nll(p):
        if abs(p[1]) > _LOG_BOUND:
            return math.inf
        return -float(np.dot(wsum, pln_log_pmf(k, p[0], math.exp(p[1])))) / W

    res = minimize_nelder_mead(nll, x0)
    return PoissonLogNormal(float(res.x[0]), math.exp(res.x[1])), res


_FITTERS = {"lognormal": _fit_lognormal, "gamma": _fit_gamma, "pln": _fit_pln}


def fit_weighted(kind: str, y, w) -> DensityFit:
    """Maximize the weighted log-likelihood for family ``kind``.

    Log-normal and Gamma are optimized with bounded L-BFGS on
    (location, log-scale) parameters; the Poisson-lognormal with Nelder-Mead.
    Starting values come from weighted moments.
    """
    if kind not in _FITTERS:
        raise ValueError(f"unknown family {kind!r}; choose from {sorted(_FITTERS)}")
    uniq, wsum = _aggregate(y, w)
    if np.any(uniq < 1):
        raise ValueError("stay lengths must be >= 1")
    if kind in ("lognormal", "gamma") and uniq.size < 2:
        raise ValueError(f"{kind} fit is degenerate: all stay lengths are identical")
    if kind == "pln" and uniq.size < 2:
        raise ValueError("pln fit needs at least two distinct stay lengths")
    family, res = _FITTERS[kind](uniq, wsum)
    return DensityFit(
        family=family,
        loglik=math.fsum(wsum * np.asarray(family.logpdf(uniq), dtype=float)),
        n_eff=float(wsum.sum()),
        converged=res.converged,
        iterations=res.iterations,
    )


@dataclass(frozen=True)
class RankedFit:
    fit: DensityFit
    delta_aic: float
    delta_bic: float


def rank_models(fits: Sequence[DensityFit]) -> list[RankedFit]:
    """Order fits by AIC (BIC breaks ties, then input order)."""
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("need at least two fits to rank")
    n0 = fits[0].n_eff
    if any(not math.isclose(f.n_eff, n0, rel_tol=1e-12) for f in fits):
        raise ValueError("fits were computed on different tables (n_eff differs)")
    order = sorted(range(len(fits)), key=lambda i: (fits[i].aic, fits[i].bic, i))
    best = fits[order[0]]
    return [RankedFit(fits[i], fits[i].aic - best.aic, fits[i].bic - best.bic) for i in order]


def overlay_points(fit: DensityFit, y, w) -> list[tuple[int, float, float]]:
    """(y, empirical CDF, fitted CDF) at each distinct stay length."""
    uniq, wsum = _aggregate(y, w)
    ecdf = np.cumsum(wsum) / wsum.sum()
    ecdf[-1] = 1.0
    fitted = np.clip(np.asarray(fit.family.cdf(uniq), dtype=float), 0.0, 1.0)
    fitted = np.maximum.accumulate(fitted)
    return [(int(a), float(b), float(c)) for a, b, c in zip(uniq, ecdf, fitted)]
