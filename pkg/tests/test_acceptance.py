"""End-to-end acceptance checks, one test (or group) per criterion.

Each check records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time
import warnings

import mpmath as mp
import numpy as np
import pytest
from scipy import linalg, stats

from conftest import record
from staylength.cli import main
from staylength.densfit import fit_lognormal_closed_form, fit_weighted, pln_log_pmf, rank_models
from staylength.glm import COLUMN_LABELS, build_design, fit_negbin
from staylength.hurdle import empirical_decomposition, impact_rows
from staylength.ingest import Phase
from staylength.sarima import (
    BoundaryWarning,
    exact_loglik_differenced,
    fit_sarima,
    information_criteria,
    ljung_box,
    lr_test_values,
    ma_autocovariance,
)
from staylength.simgen import SarimaSimSpec, simulate_nb_regression, simulate_sarima
from staylength.wstats import weighted_mean, weighted_quantile, weighted_variance


# -- 1 ---------------------------------------------------------------------------------

def _expanded_quantile(x_sorted, p):
    n = x_sorted.size
    j = 0
    while j + 1 < p * n:
        j += 1
    return float(x_sorted[min(j, n - 1)])


def test_criterion_1_weighted_statistics_oracle():
    gen = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_mean = worst_var = 0.0
    quantile_mismatch = 0
    for _ in range(500):
        n = int(gen.integers(1, 201))
        y = gen.integers(1, 181, n)
        w = gen.integers(1, 21, n)
        x = np.sort(np.repeat(y, w)).astype(float)
        m = math.fsum(x) / x.size
        v = math.fsum((x - m) ** 2) / x.size
        worst_mean = max(worst_mean, abs(weighted_mean(y, w) - m) / abs(m))
        got_v = weighted_variance(y, w)
        worst_var = max(worst_var, abs(got_v - v) / v if v > 0 else abs(got_v))
        for p in (0.05, 0.25, 0.5, 0.75, 0.95, 1.0):
            quantile_mismatch += weighted_quantile(y, w, p) != _expanded_quantile(x, p)
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-12 and worst_var <= 1e-12 and quantile_mismatch == 0 and elapsed < 10
    record(1, ok, f"max rel err mean {worst_mean:.1e}, var {worst_var:.1e}; "
                  f"{quantile_mismatch} quantile mismatches; {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_lognormal_closed_form():
    gen = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(gen.integers(5, 300))
        y = np.floor(np.exp(gen.normal(gen.uniform(0.2, 2.5), gen.uniform(0.3, 1.5), n)) + 0.5).clip(1, 180)
        w = gen.integers(1, 50, n)
        if np.unique(y).size < 2:
            y[0] = y[0] + 1
        fit = fit_weighted("lognormal", y, w)
        ref = fit_lognormal_closed_form(y, w)
        worst = max(worst, abs(fit.family.mu - ref.mu), abs(fit.family.sigma - ref.sigma))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 30
    record(2, ok, f"max |MLE - closed form| = {worst:.1e} over 100 tables; {elapsed:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def _mp_pln_pmf(k, mu, sigma):
    """Independent oracle: 30-digit adaptive tanh-sinh quadrature around the peak."""
    mp.mp.dps = 30
    k, mu, sigma = int(k), mp.mpf(mu), mp.mpf(sigma)
    lgk = mp.loggamma(k + 1)

    def g(z):
        eta = mu + sigma * z
        return k * eta - mp.exp(eta) - lgk - z * z / 2

    grid = [mp.mpf(z) / 10 for z in range(-400, 401)]
    zp = max(grid, key=g)
    peak = g(zp)
    pts = [zp + mp.mpf(d) for d in np.linspace(-12, 12, 25)]
    val = mp.quad(lambda z: mp.exp(g(z) - peak), pts)
    return float(mp.log(val) + peak - mp.log(mp.sqrt(2 * mp.pi)))


def test_criterion_3_pln_correctness():
    norm_err = 0.0
    for mu, sigma in [(0.3, 0.2), (1.0, 0.8), (2.0, 1.2), (3.0, 0.5)]:
        k = np.arange(0, 20000)
        norm_err = max(norm_err, abs(math.fsum(np.exp(pln_log_pmf(k, mu, sigma))) - 1.0))
    k = np.arange(0, 60)
    lim_err = float(np.max(np.abs(np.exp(pln_log_pmf(k, 2.0, 1e-8)) - stats.poisson.pmf(k, math.e ** 2))))
    gen = np.random.default_rng(303)
    spot_err = 0.0
    for _ in range(20):
        mu = gen.uniform(-0.5, 4.0)
        sigma = gen.uniform(0.1, 2.0)
        kk = int(gen.integers(0, 120))
        ref = _mp_pln_pmf(kk, mu, sigma)
        got = float(pln_log_pmf(kk, mu, sigma))
        # compare on the probability scale, relative to the value itself
        spot_err = max(spot_err, abs(math.expm1(got - ref)))
    ok = norm_err <= 1e-8 and lim_err <= 1e-6 and spot_err <= 1e-8
    record(3, ok, f"normalization {norm_err:.1e}, Poisson limit {lim_err:.1e}, "
                  f"20 spot values rel err {spot_err:.1e}")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_model_ranking():
    gen = np.random.default_rng(404)
    t0 = time.perf_counter()
    # heavy-tailed log-normal: mean about 4 nights, sd about 7
    x = np.exp(gen.normal(0.716, 1.173, 100_000))
    y = np.clip(np.floor(x + 0.5), 1, 180).astype(int)
    uniq, counts = np.unique(y, return_counts=True)
    fits = [fit_weighted(kind, uniq, counts) for kind in ("lognormal", "pln", "gamma")]
    ranked = rank_models(fits)
    order = [r.fit.name for r in ranked]
    elapsed = time.perf_counter() - t0
    ok = order == ["lognormal", "pln", "gamma"] and all(f.converged for f in fits) and elapsed < 60
    record(4, ok, "AIC order " + " < ".join(order) + " (dAIC " +
           ", ".join(f"{r.delta_aic:.0f}" for r in ranked) + f"); {elapsed:.1f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

TRUE_IRR = {"Post-vaccine": 0.935, "Pre-COVID": 0.838, "April": 1.030}


def _true_beta():
    beta = np.zeros(14)
    beta[0] = 1.2
    for label, irr in TRUE_IRR.items():
        beta[COLUMN_LABELS.index(label)] = math.log(irr)
    return beta


@pytest.mark.slow
def test_criterion_5_nb_recovery():
    t0 = time.perf_counter()
    beta = _true_beta()
    phases, months, y, w = simulate_nb_regression(beta, 1.5, 1_000_000, seed=505)
    fit = fit_negbin(build_design(phases, months), y, w)
    big_ok = fit.converged and fit.n_eff == 1_000_000
    details = []
    for label, irr in TRUE_IRR.items():
        i = COLUMN_LABELS.index(label)
        est = math.exp(fit.coefficients[i])
        within_pct = abs(est / irr - 1) <= 0.01
        within_se = abs(fit.coefficients[i] - math.log(irr)) <= 3 * fit.se[i]
        big_ok &= within_pct and within_se
        details.append(f"{label} {est:.4f}")

    cover = {label: 0 for label in TRUE_IRR}
    reps = 200
    for r in range(reps):
        ph, mo, yy, ww = simulate_nb_regression(beta, 1.5, 20_000, seed=5050, stream=r + 1)
        f = fit_negbin(build_design(ph, mo), yy, ww)
        for label, irr in TRUE_IRR.items():
            i = COLUMN_LABELS.index(label)
            b, se = f.coefficients[i], f.se[i]
            cover[label] += (b - 1.96 * se) <= math.log(irr) <= (b + 1.96 * se)
    rates = {k: v / reps for k, v in cover.items()}
    cov_ok = all(0.90 <= v <= 0.99 for v in rates.values())
    elapsed = time.perf_counter() - t0
    ok = big_ok and cov_ok and elapsed < 300
    record(5, ok, "IRR " + ", ".join(details) + "; CI coverage " +
           ", ".join(f"{v:.3f}" for v in rates.values()) + f"; {elapsed:.0f}s")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_6_hurdle_arithmetic(sim_table):
    a = {r.phase: r for r in impact_rows({Phase.PRE_COVID: (0.015, 45.8), Phase.RESTRICTION: (0.029, 42.6)})}
    b = {r.phase: r for r in impact_rows({Phase.PRE_COVID: (0.015, 45.8), Phase.POST_VACCINE: (0.022, 45.8)})}
    restr = a[Phase.RESTRICTION].excess_vs_reference
    post = b[Phase.POST_VACCINE].excess_vs_reference
    gen = np.random.default_rng(606)
    worst = 0.0
    tables = [(sim_table.nights, sim_table.weights)]
    for _ in range(200):
        n = int(gen.integers(1, 300))
        tables.append((gen.integers(1, 181, n), gen.integers(1, 1000, n)))
    for y, w in tables:
        d = empirical_decomposition(y, w)
        worst = max(worst, abs(d.recombined - d.total_mean) / d.total_mean)
    ok = abs(restr - 0.55) <= 0.01 and abs(post - 0.32) <= 0.01 and worst <= 1e-12
    record(6, ok, f"uplift {restr:.4f} and {post:.4f} nights; decomposition rel err {worst:.1e}")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_sarima_likelihood_oracle():
    gen = np.random.default_rng(707)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(gen.integers(14, 37))
        theta, Theta = gen.uniform(-0.95, 0.95, 2)
        sigma2 = gen.uniform(0.05, 3.0)
        p = int(gen.integers(0, 3))
        X = gen.normal(size=(n, p))
        beta = gen.normal(size=p)
        z = gen.normal(size=n) * math.sqrt(sigma2) + X @ beta
        g = ma_autocovariance(theta, Theta, sigma2)
        col = np.zeros(n)
        col[: min(n, g.size)] = g[:n]
        dense = stats.multivariate_normal(np.zeros(n), linalg.toeplitz(col)).logpdf(z - X @ beta)
        got = exact_loglik_differenced(theta, Theta, beta, sigma2, z, X if p else None)
        worst = max(worst, abs(got - dense))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 20
    record(7, ok, f"max |exact - dense| = {worst:.1e} over 50 draws; {elapsed:.1f}s")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_sarima_recovery():
    t0 = time.perf_counter()
    truth = {"ma1": -0.76, "sma1": -0.9, "post": 0.062, "pre": -1.17, "sigma2": 0.066}
    hits = 0
    for r in range(100):
        series = simulate_sarima(SarimaSimSpec(seed=8000 + r))
        with warnings.catch_warnings():
            # boundary estimates are counted like any other replication
            warnings.simplefilter("ignore", BoundaryWarning)
            fit = fit_sarima(series)
        est = {"ma1": fit.ma1, "sma1": fit.sma, "post": fit.beta[0], "pre": fit.beta[1], "sigma2": fit.sigma2}
        hits += all(abs(est[k] - truth[k]) <= 3 * fit.se[k] for k in truth)
    elapsed = time.perf_counter() - t0
    ok = hits >= 90 and elapsed < 300
    record(8, ok, f"{hits}/100 replications within 3 SE on all parameters; {elapsed:.0f}s")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

LL_FULL, K_FULL, LL_NULL, K_NULL, N_DIFF = -12.52, 5, -25.73, 3, 59


def test_criterion_9_information_criteria_and_lr_statistic():
    full = information_criteria(LL_FULL, K_FULL, N_DIFF)
    null = information_criteria(LL_NULL, K_NULL, N_DIFF)
    lr = lr_test_values(LL_FULL, LL_NULL, K_FULL - K_NULL)
    aic_ok = abs(full["aic"] - 35.04) <= 0.01 + 1e-9 and abs(null["aic"] - 57.45) <= 0.01 + 1e-9
    stat_ok = abs(lr.statistic - 26.42) <= 0.01 and lr.dof == 2
    assert aic_ok and stat_ok, (full, null, lr)


def test_criterion_9_lr_p_value():
    full = information_criteria(LL_FULL, K_FULL, N_DIFF)
    null = information_criteria(LL_NULL, K_NULL, N_DIFF)
    lr = lr_test_values(LL_FULL, LL_NULL, K_FULL - K_NULL)
    aic_ok = abs(full["aic"] - 35.04) <= 0.01 + 1e-9 and abs(null["aic"] - 57.45) <= 0.01 + 1e-9
    stat_ok = abs(lr.statistic - 26.42) <= 0.01 and lr.dof == 2
    p_ok = lr.p_value < 1e-6
    record(9, aic_ok and stat_ok and p_ok,
           f"AIC {full['aic']:.2f} / {null['aic']:.2f}, LR {lr.statistic:.2f} on {lr.dof} dof, "
           f"p = {lr.p_value:.3e} (required < 1e-6)")
    assert p_ok, f"chi2(2) tail of {lr.statistic:.2f} is {lr.p_value:.3e}, not below 1e-6"


# -- 10 --------------------------------------------------------------------------------

REFERENCE_SERIES = [
    0.12, -0.53, 1.41, 0.27, -1.08, 0.66, 0.04, -0.91, 1.73, -0.22, 0.35, -1.47,
    0.88, 0.19, -0.64, 1.02, -0.31, 0.57, -1.21, 0.43, 0.09, -0.76, 1.15, -0.18,
]


def _hand_q(x, lags):
    n = len(x)
    mean = sum(x) / n
    d = [v - mean for v in x]
    c0 = sum(v * v for v in d)
    q = 0.0
    for k in range(1, lags + 1):
        ck = sum(d[t] * d[t - k] for t in range(k, n))
        q += (ck / c0) ** 2 / (n - k)
    return n * (n + 2) * q


def test_criterion_10_ljung_box():
    hand_err = max(abs(ljung_box(REFERENCE_SERIES, L).statistic - _hand_q(REFERENCE_SERIES, L)) for L in (1, 6, 12))
    gen = np.random.default_rng(1010)
    reps = 200
    wn_pass = sum(ljung_box(gen.normal(size=200), 12).p_value > 0.05 for _ in range(reps))
    ar_reject = 0
    for _ in range(reps):
        e = gen.normal(size=400)
        x = np.zeros(400)
        for t in range(1, 400):
            x[t] = 0.8 * x[t - 1] + e[t]
        ar_reject += ljung_box(x[200:], 12).p_value < 0.01
    ok = hand_err <= 1e-10 and wn_pass >= 0.90 * reps and ar_reject >= 0.95 * reps
    record(10, ok, f"hand Q err {hand_err:.1e}; white noise p>0.05 in {wn_pass}/{reps}; "
                   f"AR(1) p<0.01 in {ar_reject}/{reps}")
    assert ok


# -- 11 --------------------------------------------------------------------------------

def test_criterion_11_end_to_end_determinism(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("intensity = 1500\nseed = 1111\n")
    data = tmp_path / "bookings.csv"
    assert main(["simulate", "--spec", str(spec), "--out", str(data)]) == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["report", "--input", str(data), "--out", str(out), "--emit-collapsed"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1]
    record(11, same and len(outs[0]) > 10, f"{len(outs[0])} files, byte-identical across two report runs: {same}")
    assert same
