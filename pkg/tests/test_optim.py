import math

import numpy as np
import pytest

from staylength.optim import (
    NonFiniteObjective,
    finite_diff_gradient,
    golden_section,
    minimize_nelder_mead,
    minimize_quasi_newton,
)


def rosen(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def rosen_grad(x):
    return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])


def test_quasi_newton_quadratic():
    res = minimize_quasi_newton(lambda x: (x[0] - 3.0) ** 2, [0.0], lambda x: np.array([2 * (x[0] - 3.0)]))
    assert res.converged
    assert abs(res.x[0] - 3.0) < 1e-8


def test_quasi_newton_rosenbrock():
    res = minimize_quasi_newton(rosen, [-1.2, 1.0], rosen_grad)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)


def test_quasi_newton_active_bound():
    res = minimize_quasi_newton(lambda x: (x[0] - 3.0) ** 2, [6.0], lambda x: np.array([2 * (x[0] - 3.0)]),
                                bounds=[(5.0, None)])
    assert res.x[0] == 5.0
    assert res.grad_norm == 0.0


def test_quasi_newton_iterates_feasible_and_descending():
    seen = []

    def f(x):
        seen.append(x.copy())
        return rosen(x)

    box = [(-1.5, 0.8), (-0.5, 2.0)]
    res = minimize_quasi_newton(f, [-1.2, 1.0], rosen_grad, bounds=box)
    pts = np.array(seen)
    assert np.all(pts[:, 0] >= -1.5) and np.all(pts[:, 0] <= 0.8)
    assert np.all(pts[:, 1] >= -0.5) and np.all(pts[:, 1] <= 2.0)
    assert res.fun <= rosen(np.array([-1.2, 1.0]))
    assert abs(res.x[0] - 0.8) < 1e-6


def test_quasi_newton_x0_outside_bounds():
    with pytest.raises(ValueError):
        minimize_quasi_newton(lambda x: x[0] ** 2, [-1.0], bounds=[(0.0, 1.0)])


def test_quasi_newton_nonfinite_reports_point():
    with pytest.raises(NonFiniteObjective) as info:
        minimize_quasi_newton(lambda x: math.log(x[0]) if x[0] > 0 else math.nan, [-1.0])
    assert info.value.x.tolist() == [-1.0]


def test_quasi_newton_deterministic():
    a = minimize_quasi_newton(rosen, [-1.2, 1.0])
    b = minimize_quasi_newton(rosen, [-1.2, 1.0])
    assert np.array_equal(a.x, b.x) and a.fun == b.fun


def test_nelder_mead_abs():
    res = minimize_nelder_mead(lambda x: abs(x[0] - 2.0), [0.0])
    assert res.converged
    assert abs(res.x[0] - 2.0) < 1e-6


def test_nelder_mead_correlated_quadratic():
    A = np.array([[3.0, 1.2], [1.2, 1.0]])
    b = np.array([1.0, -2.0])
    xstar = np.linalg.solve(A, b)

    def f(x):
        return 0.5 * x @ A @ x - b @ x

    res = minimize_nelder_mead(f, [0.0, 0.0])
    np.testing.assert_allclose(res.x, xstar, atol=1e-6 * 10)
    restart = minimize_nelder_mead(f, res.x)
    assert restart.fun <= res.fun


def test_nelder_mead_iteration_cap():
    res = minimize_nelder_mead(rosen, [-1.2, 1.0], maxiter=5)
    assert not res.converged and res.iterations == 5


def test_finite_diff_gradient_values():
    assert abs(finite_diff_gradient(lambda x: x[0] ** 2, [3.0])[0] - 6.0) < 1e-5
    g = finite_diff_gradient(lambda x: (x[0] - 1) ** 2 + 3 * (x[1] + 2) ** 2, [1.0, -2.0])
    assert np.linalg.norm(g) < 1e-6


def test_finite_diff_gradient_nonfinite():
    with pytest.raises(NonFiniteObjective):
        finite_diff_gradient(lambda x: math.log(x[0]) if x[0] > 0 else math.inf, [0.0])


def test_golden_section_interior_and_boundary():
    r = golden_section(lambda t: (t - 1.3) ** 2, -5, 5)
    assert abs(r.x[0] - 1.3) < 1e-8
    r = golden_section(lambda t: t, 0.0, 1.0)
    assert r.x[0] == 0.0
