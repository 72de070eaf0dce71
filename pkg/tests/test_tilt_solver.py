import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.kernels import make_biophysics_kernel, make_gamma_ratio_kernel, make_k2, make_k3
from artifact.tilt_solver import (
    SolverError,
    boundary_curve,
    gamma_c,
    q_h_eval,
    sample_boundary,
    solve_g,
    solve_lambda1_bar,
    solve_tilt,
)


@pytest.fixture(scope="module")
def k1():
    return make_gamma_ratio_kernel(1.5)


@pytest.fixture(scope="module")
def k3():
    return make_k3(2.5, 0.02)


def _g_oracle(alpha, h, dps=30):
    # sum_t (t-1) K1(t) z^t = 1 - u^alpha - alpha z u^(alpha-1), u = 1 - z
    mp.mp.dps = dps
    al, H = mp.mpf(alpha), mp.mpf(h)

    def f(g):
        z = mp.e ** (-g)
        u = 1 - z
        return mp.e**H * (1 - u**al - al * z * u ** (al - 1)) - 1

    lo, hi = mp.mpf(0), mp.mpf(1)
    while f(hi) > 0:
        hi *= 2
    for _ in range(200):
        mid = (lo + hi) / 2
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return float((lo + hi) / 2)


def _c_closed_form(alpha, h):
    # sum_{n,m} K1(n+m) e^{-cn} = 1 - (1 - e^{-c})^(alpha-1)
    return -math.log1p(-((-math.expm1(-h)) ** (1.0 / (alpha - 1.0))))


def test_g_vanishes_for_nonpositive_h(k1):
    for h in (0.0, -0.3, -5.0):
        st_ = solve_g(k1, h)
        assert st_.g == 0.0 and math.isnan(st_.lambda1_bar) and math.isnan(st_.gamma_c)


@pytest.mark.parametrize("h", [1e-4, 0.3, 1.0, 5.0])
def test_g_matches_bisection_oracle(k1, h):
    st_ = solve_g(k1, h)
    assert st_.g == pytest.approx(_g_oracle(1.5, h), rel=1e-12)
    assert st_.residuals["g"] <= 1e-12


def test_g_defining_equation(k3):
    for h in (0.01, 0.5, 3.0):
        st_ = solve_g(k3, h)
        s = k3.moments(st_.g, 1)
        assert math.exp(h) * (s[1] - s[0]) == pytest.approx(1.0, abs=1e-12)


def test_g_small_h_exponent(k1):
    hs = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    gs = np.array([solve_g(k1, h).g for h in hs])
    slope = np.polyfit(np.log(hs), np.log(gs), 1)[0]
    assert slope == pytest.approx(2.0, rel=0.05)


def test_g_monotone_and_convex(k3):
    hs = np.linspace(0.05, 4.0, 40)
    gs = np.array([solve_g(k3, h).g for h in hs])
    assert np.all(np.diff(gs) > 0)
    assert np.all(np.diff(gs, 2) > -1e-12)


@pytest.mark.parametrize("h", [1e-5, 0.1, 1.0, 5.0])
def test_lambda1_bar_closed_form(k1, h):
    st_ = solve_tilt(k1, h)
    assert st_.c == pytest.approx(_c_closed_form(1.5, h), rel=1e-11)
    assert st_.residuals["lambda1_bar"] <= 1e-12


@pytest.mark.parametrize("h", [0.1, 1.0, 5.0])
def test_lambda1_bar_below_minus_g(k1, k3, h):
    for k in (k1, k3):
        st_ = solve_tilt(k, h)
        assert st_.lambda1_bar < -st_.g


def test_lambda1_bar_is_not_below_minus_one_at_small_h(k1):
    # the bound lambda1_bar < -1 fails at small h; lambda1_bar < -g is what holds
    st_ = solve_tilt(k1, 0.1)
    assert -1.0 < st_.lambda1_bar < -st_.g


def test_lambda1_bar_requires_positive_h(k1):
    with pytest.raises(SolverError):
        solve_lambda1_bar(k1, solve_g(k1, -1.0))


def test_q_h_basic(k1):
    st_ = solve_tilt(k1, 1.0)
    assert q_h_eval(k1, st_, 0.0, 0.0) == pytest.approx(1.0, abs=1e-14)
    assert q_h_eval(k1, st_, st_.g + 1e-9, 0.0) == math.inf


@settings(max_examples=30, deadline=None)
@given(st.floats(-3.0, 0.2), st.floats(-3.0, 0.2))
def test_q_h_symmetry(l1, l2):
    k = make_k2(1.5, 0.01)
    st_ = solve_g(k, 1.0)
    l1, l2 = min(l1, st_.g), min(l2, st_.g)
    assert q_h_eval(k, st_, l1, l2) == pytest.approx(q_h_eval(k, st_, l2, l1), rel=1e-12)


def test_q_h_matches_naive_sum(k1):
    st_ = solve_g(k1, 1.0)
    a, b = st_.g + 0.5, st_.g - 0.2
    L = 2500
    v = k1.values(2 * L + 2)
    n = np.arange(1, L + 1.0)[:, None]
    m = np.arange(1, L + 1.0)[None, :]
    naive = math.e * np.sum(v[(n + m).astype(int)] * np.exp(-a * n - b * m))
    assert q_h_eval(k1, st_, -0.5, 0.2) == pytest.approx(naive, rel=1e-10)


def test_gamma_c_flat_for_k1(k1):
    for h in np.linspace(0.2, 10.0, 50):
        assert solve_tilt(k1, h).gamma_c == pytest.approx(2.0, abs=1e-6)


def test_gamma_c_small_h_limit_for_finite_second_moment(k3):
    vals = [solve_tilt(k3, h).gamma_c for h in (1e-3, 1e-5, 1e-7)]
    assert vals[0] > vals[1] > vals[2] > 1.0
    assert vals[2] - 1.0 < 1e-3


def test_gamma_c_large_h_limit(k3):
    # sum_m m K(1+m) = 1, sum_m K(1+m) = S_0(0)
    limit = 1.0 / k3.moments(0.0, 0)[0]
    assert solve_tilt(k3, 40.0).gamma_c == pytest.approx(limit, rel=1e-6)


def test_gamma_c_equals_inverse_boundary_slope(k3):
    st_ = solve_tilt(k3, 1.0)
    _, d = boundary_curve(k3, st_, st_.lambda1_bar)
    assert st_.gamma_c == pytest.approx(-1.0 / d, rel=1e-12)
    assert gamma_c(k3, solve_g(k3, -1.0)) != gamma_c(k3, solve_g(k3, -1.0))  # nan


def test_boundary_endpoints(k3):
    st_ = solve_tilt(k3, 1.0)
    l2, d = boundary_curve(k3, st_, 0.0)
    assert l2 == 0.0 and d == pytest.approx(-1.0, abs=1e-12)
    l2, _ = boundary_curve(k3, st_, st_.lambda1_bar)
    assert l2 == pytest.approx(st_.g, abs=1e-12)
    l2, _ = boundary_curve(k3, st_, st_.g)
    assert l2 == pytest.approx(st_.lambda1_bar, abs=1e-12)
    with pytest.raises(SolverError):
        boundary_curve(k3, st_, st_.g + 0.1)


def test_boundary_mirror_symmetry(k3):
    st_ = solve_tilt(k3, 1.0)
    for x in np.linspace(st_.lambda1_bar, 0.0, 9)[1:-1]:
        y, d = boundary_curve(k3, st_, x)
        x2, d2 = boundary_curve(k3, st_, y)
        assert x2 == pytest.approx(x, rel=1e-10)
        assert d * d2 == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("maker,h", [(lambda: make_k3(2.5, 0.02), 1.0),
                                     (lambda: make_k2(1.5, 0.01), 3.0),
                                     (lambda: make_biophysics_kernel(2.15, 6.0, 3.0, 1.0)[0], 0.5)])
def test_boundary_concave_and_derivative_consistent(maker, h):
    k = maker()
    st_ = solve_tilt(k, h)
    curve = sample_boundary(k, st_, 100)
    assert np.all(np.diff(curve.lambda2) < 0)
    assert np.all(np.diff(curve.lambda2, 2) <= 1e-8)
    for x in np.linspace(st_.lambda1_bar, 0.0, 7)[1:-1]:
        eps = 1e-5 * abs(st_.lambda1_bar)
        fd = (boundary_curve(k, st_, x + eps)[0] - boundary_curve(k, st_, x - eps)[0]) / (2 * eps)
        assert boundary_curve(k, st_, x)[1] == pytest.approx(fd, rel=1e-6, abs=1e-9)
    for x, y in zip(curve.lambda1[::10], curve.lambda2[::10]):
        assert q_h_eval(k, st_, x, y) == pytest.approx(1.0, abs=1e-12)
