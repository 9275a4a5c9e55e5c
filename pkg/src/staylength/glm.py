"""Weighted negative-binomial (log link) and logistic (logit link) GLMs.

Coefficients are fitted by iteratively reweighted least squares with QR
solves. For the negative binomial the dispersion ``theta`` (variance
``mu + mu**2/theta``) alternates with IRLS, each round maximizing the
log-likelihood in ``log theta`` by golden-section search. Weights are
frequency weights throughout.
"""

from __future__ import annotations

import calendar
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .ingest import BookingTable, Phase
from .optim import golden_section

__all__ = [
    "DesignMatrix",
    "GlmFit",
    "RateRatioRow",
    "RankDeficientError",
    "build_design",
    "design_from_table",
    "fit_weighted_glm",
    "fit_negbin",
    "fit_logistic",
    "rate_ratios",
    "predict_monthly_mean",
    "nb_loglik",
    "WALD_Z",
]

WALD_Z = 1.96
MONTH_LABELS = [calendar.month_name[m] for m in range(2, 13)]
COLUMN_LABELS = ["Intercept", "Post-vaccine", "Pre-COVID", *MONTH_LABELS]
THETA_RANGE = (1e-3, 1e6)


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    labels: list[str]

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] != len(self.labels):
            raise ValueError("design matrix shape does not match labels")

    @property
    def shape(self):
        return self.X.shape


def build_design(phases: Sequence[int] | np.ndarray, months: Sequence[int] | np.ndarray) -> DesignMatrix:
    """Intercept, Post-vaccine and Pre-COVID dummies, and February-December dummies.

    ``phases`` are :class:`Phase` codes (or members); the restriction phase and
    January are absorbed in the intercept.
    """
    phases = np.asarray([p.code if isinstance(p, Phase) else p for p in phases], dtype=np.int64)
    months = np.asarray(months, dtype=np.int64)
    if phases.shape != months.shape:
        raise ValueError("phases and months differ in length")
    if np.any((months < 1) | (months > 12)):
        raise ValueError("months must be in 1..12")
    X = np.zeros((phases.size, 14))
    X[:, 0] = 1.0
    X[:, 1] = phases == Phase.POST_VACCINE.code
    X[:, 2] = phases == Phase.PRE_COVID.code
    rows = np.flatnonzero(months >= 2)
    X[rows, months[rows] + 1] = 1.0
    return DesignMatrix(X, list(COLUMN_LABELS))


def design_from_table(table: BookingTable) -> DesignMatrix:
    return build_design(table.phase, table.month)


@dataclass(frozen=True)
class GlmFit:
    family: str
    coefficients: np.ndarray
    covariance: np.ndarray
    labels: list[str]
    loglik: float
    converged: bool
    iterations: int
    n_eff: float
    theta: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients

    def predict(self, X) -> np.ndarray:
        eta = self.linear_predictor(X)
        if self.family == "logistic":
            return special.expit(eta)
        return np.exp(eta)


def _collapse_rows(X, y, w):
    """Merge identical (x, y) rows by summing weights."""
    key = np.column_stack([X, y])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    return uniq[:, :-1], uniq[:, -1], np.bincount(inv, weights=w, minlength=uniq.shape[0])


def _check_rank(X, w, labels):
    Xs = X * np.sqrt(w)[:, None]
    _, R, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d.max() * max(Xs.shape) * np.finfo(float).eps * 1e3 if d.size else 0.0
    rank = int(np.sum(d > tol))
    if rank < X.shape[1]:
        raise RankDeficientError([labels[i] for i in sorted(piv[rank:])])


def _wls(X, z, W):
    sw = np.sqrt(W)
    Q, R = linalg.qr(X * sw[:, None], mode="economic")
    return linalg.solve_triangular(R, Q.T @ (z * sw))


def nb_loglik(y, mu, theta, w) -> float:
    y = np.asarray(y, dtype=float)
    # lgamma(y+theta) - lgamma(theta) via betaln stays accurate for large theta
    pos = y > 0
    lg_ratio = np.zeros_like(y)
    lg_ratio[pos] = special.gammaln(y[pos]) - special.betaln(theta, y[pos])
    ll = (
        lg_ratio
        - special.gammaln(y + 1.0)
        - theta * np.log1p(mu / theta)
        + special.xlogy(y, mu)
        - special.xlogy(y, theta + mu)
    )
    return math.fsum(w * ll)


def _poisson_loglik(y, mu, w):
    return math.fsum(w * (special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)))


def _logistic_loglik(y, eta, w):
    return math.fsum(w * (y * eta - np.logaddexp(0.0, eta)))


def _nb_deviance(y, mu, theta, w):
    dev = 2.0 * (special.xlogy(y, y / mu) - (y + theta) * np.log1p((y - mu) / (mu + theta)))
    return float(np.dot(w, dev))


def _irls_log(X, y, w, beta, theta, tol, maxiter):
    """IRLS for a log-link count model; ``theta=None`` means Poisson."""
    eta = X @ beta
    mu = np.exp(eta)

    def deviance(mu):
        if theta is None:
            return float(np.dot(w, 2.0 * (special.xlogy(y, y / mu) - (y - mu))))
        return _nb_deviance(y, mu, theta, w)

    dev = deviance(mu)
    converged = False
    it = 0
    for it in range(1, maxiter + 1):
        var_factor = 1.0 if theta is None else 1.0 / (1.0 + mu / theta)
        W = w * mu * var_factor
        z = eta + (y - mu) / mu
        beta_new = _wls(X, z, W)
        eta_new = X @ beta_new
        mu_new = np.exp(eta_new)
        dev_new = deviance(mu_new)
        # step halving if deviance got worse (rarely needed with a log link)
        halvings = 0
        while (not math.isfinite(dev_new) or dev_new > dev + 1e-12 * abs(dev)) and halvings < 30:
            beta_new = 0.5 * (beta + beta_new)
            eta_new = X @ beta_new
            mu_new = np.exp(eta_new)
            dev_new = deviance(mu_new)
            halvings += 1
        change = abs(dev_new - dev) / (abs(dev_new) + 0.1)
        step = np.max(np.abs(beta_new - beta))
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        if change < tol and step < 1e-7:
            converged = True
            break
    return beta, mu, converged, it


def _theta_step(y, mu, w):
    def neg(log_theta):
        return -nb_loglik(y, mu, math.exp(log_theta), w)

    res = golden_section(neg, math.log(THETA_RANGE[0]), math.log(THETA_RANGE[1]), xtol=1e-12)
    return math.exp(float(res.x[0]))


def fit_negbin(
    X,
    y,
    w,
    labels: Sequence[str] | None = None,
    *,
    theta: float | None = None,
    tol: float = 1e-8,
    maxiter: int = 50,
    max_outer: int = 100,
) -> GlmFit:
    """Weighted NB2 regression with log link.

    ``theta`` fixes the dispersion; otherwise it is estimated by alternating
    IRLS and a profile search until both change by less than ``tol``.
    """
    X, y, w, labels = _prepare(X, y, w, labels)
    if np.any(y < 0):
        raise ValueError("negative-binomial response must be non-negative")
    Xc, yc, wc = _collapse_rows(X, y, w)
    _check_rank(Xc, wc, labels)
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(np.dot(wc, yc) / wc.sum()) if np.all(Xc[:, 0] == 1) else 0.0
    warnings = []
    # Poisson start, then alternate
    beta, mu, ok, iters = _irls_log(Xc, yc, wc, beta, None, tol, maxiter)
    total_iters = iters
    if theta is not None:
        th = float(theta)
        beta, mu, ok, iters = _irls_log(Xc, yc, wc, beta, th, tol, maxiter)
        total_iters += iters
        converged = ok
    else:
        th = _theta_step(yc, mu, wc)
        converged = False
        for _ in range(max_outer):
            beta_new, mu, ok, iters = _irls_log(Xc, yc, wc, beta, th, tol, maxiter)
            total_iters += iters
            th_new = _theta_step(yc, mu, wc)
            change = max(np.max(np.abs(beta_new - beta)), abs(math.log(th_new) - math.log(th)))
            beta, th = beta_new, th_new
            if ok and change < tol:
                converged = True
                break
        if th >= THETA_RANGE[1] * 0.999:
            warnings.append("theta at upper search bound: data are not over-dispersed")
        beta, mu, ok, iters = _irls_log(Xc, yc, wc, beta, th, tol, maxiter)
        converged = converged and ok
    Wf = wc * mu / (1.0 + mu / th)
    info = (Xc * Wf[:, None]).T @ Xc
    cov = linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    if not converged:
        warnings.append("IRLS did not converge")
    return GlmFit(
        family="negbin",
        coefficients=beta,
        covariance=cov,
        labels=labels,
        loglik=nb_loglik(yc, mu, th, wc),
        converged=converged,
        iterations=total_iters,
        n_eff=float(wc.sum()),
        theta=th,
        warnings=warnings,
    )


def fit_poisson(X, y, w, labels=None, *, tol: float = 1e-8, maxiter: int = 50) -> GlmFit:
    X, y, w, labels = _prepare(X, y, w, labels)
    Xc, yc, wc = _collapse_rows(X, y, w)
    _check_rank(Xc, wc, labels)
    beta = np.zeros(X.shape[1])
    beta, mu, ok, iters = _irls_log(Xc, yc, wc, beta, None, tol, maxiter)
    info = (Xc * (wc * mu)[:, None]).T @ Xc
    cov = linalg.inv(info)
    return GlmFit("poisson", beta, 0.5 * (cov + cov.T), labels, _poisson_loglik(yc, mu, wc), ok, iters,
                  float(wc.sum()))


def fit_logistic(X, y, w, labels=None, *, tol: float = 1e-8, maxiter: int = 50) -> GlmFit:
    """Weighted logistic regression; separation yields a non-converged fit."""
    X, y, w, labels = _prepare(X, y, w, labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    if np.all(y == y[0]):
        raise ValueError("logistic response has a single class")
    Xc, yc, wc = _collapse_rows(X, y, w)
    _check_rank(Xc, wc, labels)
    beta = np.zeros(X.shape[1])
    eta = Xc @ beta
    dev = -2.0 * _logistic_loglik(yc, eta, wc)
    converged = False
    warnings = []
    it = 0
    for it in range(1, maxiter + 1):
        p = special.expit(eta)
        v = np.clip(p * (1.0 - p), 1e-300, None)
        z = eta + (yc - p) / v
        beta_new = _wls(Xc, z, wc * v)
        eta_new = Xc @ beta_new
        dev_new = -2.0 * _logistic_loglik(yc, eta_new, wc)
        halvings = 0
        while dev_new > dev + 1e-12 * abs(dev) and halvings < 30:
            beta_new = 0.5 * (beta + beta_new)
            eta_new = Xc @ beta_new
            dev_new = -2.0 * _logistic_loglik(yc, eta_new, wc)
            halvings += 1
        change = abs(dev_new - dev) / (abs(dev_new) + 0.1)
        step = np.max(np.abs(beta_new - beta))
        beta, eta, dev = beta_new, eta_new, dev_new
        if change < tol and step < 1e-7:
            converged = True
            break
    p = special.expit(eta)
    if np.max(np.abs(beta)) > 25.0 or np.any(np.minimum(p, 1.0 - p) < 1e-10):
        converged = False
        warnings.append("fitted probabilities at 0 or 1: possible separation")
    if not converged and not warnings:
        warnings.append("IRLS did not converge")
    info = (Xc * (wc * p * (1.0 - p))[:, None]).T @ Xc
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError:
        cov = np.full_like(info, np.nan)
    return GlmFit(
        family="logistic",
        coefficients=beta,
        covariance=0.5 * (cov + cov.T),
        labels=labels,
        loglik=_logistic_loglik(yc, eta, wc),
        converged=converged,
        iterations=it,
        n_eff=float(wc.sum()),
        warnings=warnings,
    )


def _prepare(X, y, w, labels):
    if isinstance(X, DesignMatrix):
        labels = X.labels if labels is None else labels
        X = X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    w = np.ones(y.size) if w is None else np.asarray(w, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size or w.size != y.size:
        raise ValueError("X, y and w have inconsistent shapes")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    labels = [f"x{i}" for i in range(X.shape[1])] if labels is None else list(labels)
    return X, y, w, labels


def fit_weighted_glm(design, y, w, family: str = "negbin", **kwargs) -> GlmFit:
    """Dispatch to :func:`fit_negbin`, :func:`fit_logistic` or :func:`fit_poisson`."""
    fitters = {"negbin": fit_negbin, "logistic": fit_logistic, "poisson": fit_poisson}
    if family not in fitters:
        raise ValueError(f"unknown family {family!r}")
    return fitters[family](design, y, w, **kwargs)


@dataclass(frozen=True)
class RateRatioRow:
    label: str
    ratio: float
    ci_low: float
    ci_high: float
    coef: float
    se: float

    @property
    def percent_change(self) -> float:
        return 100.0 * (self.ratio - 1.0)

    @property
    def meaning(self) -> str:
        text = f"{self.percent_change:+.1f} %"
        if self.label in MONTH_LABELS:
            text += " vs Jan"
        return text


def rate_ratios(fit: GlmFit, *, include_intercept: bool = False) -> list[RateRatioRow]:
    """exp(coef) with Wald 95% intervals exp(coef +/- 1.96 SE)."""
    rows = []
    for label, b, se in zip(fit.labels, fit.coefficients, fit.se):
        if label == "Intercept" and not include_intercept:
            continue
        rows.append(RateRatioRow(label, math.exp(b), math.exp(b - WALD_Z * se), math.exp(b + WALD_Z * se),
                                 float(b), float(se)))
    return rows


def predict_monthly_mean(fit: GlmFit, design, weights, month_keys) -> list[tuple[str, float]]:
    """Weighted average of fitted means exp(x'beta) within each month key."""
    X = design.X if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    weights = np.asarray(weights, dtype=float)
    keys = np.asarray(month_keys)
    mu = fit.predict(X)
    out = []
    for k in np.unique(keys):
        sel = keys == k
        out.append((str(k), float(np.dot(weights[sel], mu[sel]) / weights[sel].sum())))
    return out
