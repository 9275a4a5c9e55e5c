import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from staylength.densfit import (
    DensityFit,
    Gamma,
    LogNormal,
    PoissonLogNormal,
    fit_lognormal_closed_form,
    fit_weighted,
    overlay_points,
    pln_log_pmf,
    rank_models,
    weighted_loglik,
)
from staylength.optim import finite_diff_gradient


def test_closed_form_example():
    y = np.array([math.e, math.e ** 3])
    fam = fit_lognormal_closed_form(y, [2, 2])
    assert fam.mu == pytest.approx(2.0, abs=1e-15)
    assert fam.sigma ** 2 == pytest.approx(1.0, abs=1e-14)


def test_lognormal_mle_matches_closed_form():
    gen = np.random.default_rng(3)
    y = np.floor(np.exp(gen.normal(1.2, 0.8, 400)) + 0.5).clip(1, 180).astype(int)
    w = gen.integers(1, 10, y.size)
    fit = fit_weighted("lognormal", y, w)
    ref = fit_lognormal_closed_form(y, w)
    assert fit.converged
    assert fit.family.mu == pytest.approx(ref.mu, abs=1e-6)
    assert fit.family.sigma == pytest.approx(ref.sigma, abs=1e-6)


def test_gamma_recovery():
    gen = np.random.default_rng(8)
    y = np.maximum(1, np.round(gen.gamma(3.0, 1 / 0.4, 100_000))).astype(int)
    fit = fit_weighted("gamma", y, np.ones_like(y))
    assert fit.converged
    # rounding to integers perturbs the shape slightly; the mean is preserved
    assert fit.family.shape / fit.family.rate == pytest.approx(np.mean(y), rel=2e-3)
    assert fit.family.shape == pytest.approx(3.0, rel=0.02)
    assert fit.family.rate == pytest.approx(0.4, rel=0.02)


@pytest.mark.parametrize("kind", ["lognormal", "gamma", "pln"])
def test_score_vanishes_at_fit(kind):
    gen = np.random.default_rng(21)
    y = np.floor(np.exp(gen.normal(1.0, 0.9, 3000)) + 0.5).clip(1, 180).astype(int)
    w = gen.integers(1, 4, y.size)
    fit = fit_weighted(kind, y, w)
    fam = type(fit.family)
    p = np.array(list(fit.family.params.values()))
    if kind == "gamma":
        ll = lambda q: weighted_loglik(fam(math.exp(q[0]), math.exp(q[1])), y, w)
        x = np.log(p)
    else:
        ll = lambda q: weighted_loglik(fam(q[0], math.exp(q[1])), y, w)
        x = np.array([p[0], math.log(p[1])])
    g = finite_diff_gradient(ll, x)
    assert np.max(np.abs(g)) < 1e-4 * w.sum()


@pytest.mark.parametrize("kind", ["lognormal", "gamma", "pln"])
def test_weights_equal_replication(kind):
    y = np.array([1, 2, 2, 3, 5, 8, 13, 30])
    w = np.array([4, 3, 1, 5, 2, 2, 1, 1])
    a = fit_weighted(kind, y, w)
    b = fit_weighted(kind, np.repeat(y, w), np.ones(w.sum(), dtype=int))
    assert a.family == b.family
    assert a.loglik == b.loglik


def test_information_criteria():
    fit = fit_weighted("lognormal", [1, 2, 4, 9], [3, 3, 2, 2])
    assert fit.k == 2
    assert fit.aic == pytest.approx(4 - 2 * fit.loglik)
    assert fit.bic == pytest.approx(2 * math.log(10) - 2 * fit.loglik)


def _fake(loglik, n=100.0):
    return DensityFit(family=LogNormal(0.0, 1.0), loglik=loglik, n_eff=n, converged=True, iterations=1)


def test_rank_example():
    ranked = rank_models([_fake(-110.0), _fake(-100.0)])
    assert ranked[0].fit.loglik == -100.0
    assert ranked[0].delta_aic == 0.0
    assert ranked[1].delta_aic == pytest.approx(20.0)
    assert all(r.delta_aic >= 0 for r in ranked)


def test_rank_rejects_mixed_tables():
    with pytest.raises(ValueError):
        rank_models([_fake(-1.0, 10.0), _fake(-2.0, 11.0)])


@pytest.mark.parametrize(
    "kind, y",
    [("lognormal", [3, 3]), ("gamma", [5]), ("pln", [2, 2, 2]), ("lognormal", [0, 4])],
)
def test_degenerate_inputs(kind, y):
    with pytest.raises(ValueError):
        fit_weighted(kind, y, np.ones(len(y)))


def test_unknown_family():
    with pytest.raises(ValueError):
        fit_weighted("weibull", [1, 2], [1, 1])


def test_overlay_properties():
    y = np.array([1, 2, 3, 5, 9, 40])
    w = np.array([5, 4, 3, 2, 1, 1])
    fit = fit_weighted("gamma", y, w)
    pts = overlay_points(fit, y, w)
    assert [p[0] for p in pts] == sorted(set(y.tolist()))
    ecdf = [p[1] for p in pts]
    fitted = [p[2] for p in pts]
    assert ecdf[-1] == 1.0
    assert all(0 <= a <= b <= 1 for a, b in zip(ecdf, ecdf[1:]))
    assert all(0 <= a <= b <= 1 for a, b in zip(fitted, fitted[1:]))


# -- Poisson-lognormal --------------------------------------------------------

def test_pln_normalizes():
    k = np.arange(0, 4000)
    for mu, sigma in [(0.5, 0.3), (1.5, 1.0), (2.5, 0.6)]:
        total = math.fsum(np.exp(pln_log_pmf(k, mu, sigma)))
        assert abs(total - 1.0) < 1e-8


def test_pln_poisson_limit():
    k = np.arange(0, 40)
    lam = math.exp(1.7)
    diff = np.exp(pln_log_pmf(k, 1.7, 1e-7)) - stats.poisson.pmf(k, lam)
    assert np.max(np.abs(diff)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 4.0), st.floats(0.05, 2.5), st.integers(0, 150))
def test_pln_matches_direct_quadrature(mu, sigma, k):
    from scipy import integrate, special

    def f(z):
        eta = mu + sigma * z
        return math.exp(k * eta - math.exp(eta) - special.gammaln(k + 1) - 0.5 * z * z) / math.sqrt(2 * math.pi)

    zk = (math.log(max(k, 0.5)) - mu) / sigma
    pts = sorted({0.0, max(-40.0, min(40.0, zk))})
    ref, _ = integrate.quad(f, -40, 40, points=pts, limit=400, epsabs=0, epsrel=1e-12)
    if ref < 1e-280:
        return
    assert float(pln_log_pmf(k, mu, sigma)) == pytest.approx(math.log(ref), abs=1e-7)


def test_pln_cdf_monotone():
    fam = PoissonLogNormal(1.2, 0.9)
    c = fam.cdf(np.arange(1, 60))
    assert np.all(np.diff(c) >= 0) and c[-1] <= 1.0


def test_pln_rejects_bad_sigma():
    with pytest.raises(ValueError):
        pln_log_pmf(3, 0.0, 0.0)
