import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from oldf.tnc import TncOptions, check_gradient, tnc_minimize


def quadratic(H, b):
    return lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b)


def test_quadratic_reaches_exact_minimizer():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(8, 8))
    H = M @ M.T + 8 * np.eye(8)
    b = rng.normal(size=8)
    res = tnc_minimize(quadratic(H, b), np.zeros(8), TncOptions(gtol=1e-10))
    assert res.reason == "converged"
    np.testing.assert_allclose(res.x, np.linalg.solve(H, b), atol=1e-9)
    assert res.grad_norm <= 1e-10
    assert all(s.f_new < s.f_old for s in res.steps)


def test_rosenbrock():
    fg = lambda x: (rosen(x), rosen_der(x))  # noqa: E731
    res = tnc_minimize(fg, np.array([-1.2, 1.0]), TncOptions(gtol=1e-8, max_iter=200))
    assert res.reason == "converged"
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)
    assert res.fun <= res.f0


def test_stationary_start_takes_no_steps():
    res = tnc_minimize(quadratic(np.eye(3), np.zeros(3)), np.zeros(3))
    assert res.iterations == 0 and res.reason == "converged" and res.n_eval == 1


def test_iteration_cap():
    fg = lambda x: (rosen(x), rosen_der(x))  # noqa: E731
    res = tnc_minimize(fg, np.array([-1.2, 1.0]), TncOptions(gtol=1e-12, max_iter=3))
    assert res.iterations == 3 and res.reason == "max_iter"
    assert res.fun < res.f0


def test_negative_curvature_start_still_descends():
    # concave at the origin side, bounded below
    fg = lambda x: (float(np.sum(x**4 - x**2)), 4 * x**3 - 2 * x)  # noqa: E731
    res = tnc_minimize(fg, np.array([0.1, -0.2]), TncOptions(gtol=1e-9))
    assert res.reason == "converged"
    np.testing.assert_allclose(np.abs(res.x), np.sqrt(0.5), atol=1e-8)


def test_wolfe_conditions_recorded():
    rng = np.random.default_rng(1)
    H = np.diag(rng.uniform(1, 100, 10))
    res = tnc_minimize(quadratic(H, np.ones(10)), np.zeros(10), TncOptions(gtol=1e-10))
    for s in res.steps:
        assert s.slope < 0
        assert s.f_new <= s.f_old + 1e-4 * s.beta * s.slope
    assert any(s.wolfe for s in res.steps)


def test_nonfinite_gradient_raises():
    with pytest.raises(FloatingPointError):
        tnc_minimize(lambda x: (0.0, np.array([np.nan])), np.zeros(1))


def test_gradient_check():
    fg = lambda x: (rosen(x), rosen_der(x))  # noqa: E731
    assert check_gradient(fg, np.array([0.3, -0.7, 1.1])) < 1e-8
    wrong = lambda x: (rosen(x), 1.1 * rosen_der(x))  # noqa: E731
    with pytest.raises(ValueError, match="finite differences"):
        tnc_minimize(wrong, np.array([0.3, -0.7]), TncOptions(check_gradient=True))
