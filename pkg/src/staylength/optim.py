"""Deterministic numerical optimizers shared by the model fitters.

The bounded limited-memory quasi-Newton method delegates to SciPy's L-BFGS-B
routine; the simplex, golden-section and finite-difference helpers are
implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

__all__ = [
    "OptResult",
    "NonFiniteObjective",
    "finite_diff_gradient",
    "minimize_quasi_newton",
    "minimize_nelder_mead",
    "golden_section",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NonFiniteObjective(FloatingPointError):
    """The objective returned NaN or an infinity."""

    def __init__(self, x, value):
        self.x = np.array(x, dtype=float)
        self.value = value
        super().__init__(f"objective is {value!r} at x={self.x.tolist()}")


@dataclass(frozen=True)
class OptResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    grad_norm: float = math.nan
    message: str = ""


def _checked(fun: Callable[[np.ndarray], float]) -> Callable[[np.ndarray], float]:
    def wrapped(x):
        value = float(fun(x))
        if not math.isfinite(value):
            raise NonFiniteObjective(x, value)
        return value

    return wrapped


def finite_diff_gradient(fun: Callable[[np.ndarray], float], x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``max(1e-6, 1e-6*|x_i|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    f = _checked(fun)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = max(rel_step, rel_step * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def _normalize_bounds(bounds, n):
    if bounds is None:
        return [(-np.inf, np.inf)] * n
    out = []
    for lo, hi in bounds:
        lo = -np.inf if lo is None else float(lo)
        hi = np.inf if hi is None else float(hi)
        if lo > hi:
            raise ValueError(f"empty bound interval ({lo}, {hi})")
        out.append((lo, hi))
    if len(out) != n:
        raise ValueError("bounds length does not match x0")
    return out


def minimize_quasi_newton(
    fun: Callable[[np.ndarray], float],
    x0: Sequence[float],
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
    bounds: Sequence[tuple[float | None, float | None]] | None = None,
    *,
    memory: int = 10,
    pgtol: float = 1e-8,
    ftol: float = 1e-12,
    maxiter: int = 500,
) -> OptResult:
    """Bounded limited-memory BFGS.

    Stops when the projected-gradient infinity norm drops below ``pgtol`` or the
    relative objective change drops below ``ftol``. Without an analytic
    ``grad`` the central-difference gradient is used.
    """
    x0 = np.asarray(x0, dtype=float)
    box = _normalize_bounds(bounds, x0.size)
    for xi, (lo, hi) in zip(x0, box):
        if not lo <= xi <= hi:
            raise ValueError(f"x0 component {xi} outside bounds ({lo}, {hi})")
    f = _checked(fun)
    f(x0)
    jac = grad if grad is not None else (lambda x: finite_diff_gradient(f, x))

    def fg(x):
        g = np.asarray(jac(x), dtype=float)
        if not np.all(np.isfinite(g)):
            raise NonFiniteObjective(x, "non-finite gradient")
        return f(x), g

    res = optimize.minimize(
        fg,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=box,
        options={"maxcor": memory, "gtol": pgtol, "ftol": ftol, "maxiter": maxiter, "maxfun": 20 * maxiter},
    )
    x = np.clip(res.x, [b[0] for b in box], [b[1] for b in box])
    g = np.asarray(res.jac, dtype=float)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    projected = np.where((x <= lo) & (g > 0), 0.0, g)
    projected = np.where((x >= hi) & (projected < 0), 0.0, projected)
    return OptResult(
        x=x,
        fun=f(x),
        converged=bool(res.success),
        iterations=int(res.nit),
        grad_norm=float(np.max(np.abs(projected))) if projected.size else 0.0,
        message=str(res.message),
    )


def minimize_nelder_mead(
    fun: Callable[[np.ndarray], float],
    x0: Sequence[float],
    *,
    ftol: float = 1e-10,
    xtol: float = 1e-9,
    maxiter: int = 2000,
    initial_step: float = 0.05,
) -> OptResult:
    """Nelder-Mead simplex with coefficients (1, 2, 0.5, 0.5).

    Converged once the spread of objective values over the simplex falls
    below ``ftol`` and its vertices lie within ``xtol`` (relative to
    ``max(1, |x|)``) of the best one. Non-finite values are treated as +inf so
    the simplex retreats from them.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size

    def f(x):
        v = float(fun(x))
        return v if math.isfinite(v) else math.inf

    if not math.isfinite(f(x0)):
        raise NonFiniteObjective(x0, fun(x0))

    simplex = np.empty((n + 1, n))
    simplex[0] = x0
    for i in range(n):
        y = x0.copy()
        y[i] = y[i] * (1 + initial_step) if y[i] != 0 else 0.00025
        simplex[i + 1] = y
    values = np.array([f(p) for p in simplex])

    converged = False
    it = 0
    while it < maxiter:
        order = np.argsort(values, kind="stable")
        simplex = simplex[order]
        values = values[order]
        spread = np.max(np.abs(simplex[1:] - simplex[0]) / np.maximum(1.0, np.abs(simplex[0])))
        if values[-1] - values[0] < ftol and spread < xtol:
            converged = True
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        best = simplex[0].copy()
        simplex[1:] = best + 0.5 * (simplex[1:] - best)
        values[1:] = [f(p) for p in simplex[1:]]

    order = np.argsort(values, kind="stable")
    return OptResult(
        x=simplex[order[0]].copy(),
        fun=float(values[order[0]]),
        converged=converged,
        iterations=it,
        message="simplex spread below tolerance" if converged else "iteration limit reached",
    )


def golden_section(
    fun: Callable[[float], float],
    lower: float,
    upper: float,
    *,
    xtol: float = 1e-10,
    maxiter: int = 500,
) -> OptResult:
    """Minimize a unimodal scalar function on ``[lower, upper]``."""
    if not lower < upper:
        raise ValueError("golden_section needs lower < upper")
    a, b = float(lower), float(upper)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    it = 0
    while (b - a) > xtol * max(1.0, abs(a) + abs(b)) and it < maxiter:
        it += 1
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    # endpoints are candidates too: the optimum may sit on the boundary
    candidates = [(fc, c), (fd, d), (fun(lower), lower), (fun(upper), upper)]
    best_f, best_x = min(candidates, key=lambda t: t[0])
    return OptResult(
        x=np.array([best_x]),
        fun=float(best_f),
        converged=it < maxiter,
        iterations=it,
    )
