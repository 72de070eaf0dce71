import math

import numpy as np
import pytest

from artifact.kernels import make_gamma_ratio_kernel, make_k2, make_k3
from artifact.ldp import (
    Regime,
    d_properties_check,
    free_energy_derivative,
    path_law_mass,
    rate_and_free_energy,
    support_point,
)
from artifact.tilt_solver import SolverError, boundary_curve, solve_g, solve_tilt


@pytest.fixture(scope="module")
def k1():
    return make_gamma_ratio_kernel(1.5)


@pytest.fixture(scope="module")
def st1(k1):
    return solve_tilt(k1, 1.0)


def _k1_dense_boundary(alpha, h, g, l1bar, npts):
    """The curve q_h = 1 on a uniform lambda1 grid by vectorized bisection.

    Uses the closed form Q(a,b) = xy (f(y) - f(x)) / (y - x), x = e^-a, y = e^-b,
    f(z) = ((1-z)^alpha - 1 + alpha z) / z, independent of the series code.
    """

    def f(z):
        return ((1 - z) ** alpha - 1 + alpha * z) / z

    l1 = np.linspace(l1bar, 0.0, npts)[1:-1]
    x = np.exp(-(g - l1))
    lo, hi = np.zeros_like(l1), np.full_like(l1, g)  # b in [0, g]
    target = math.exp(-h)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        y = np.exp(-mid)
        q = x * y * (f(y) - f(x)) / (y - x)
        big = q > target  # q decreases in b
        lo = np.where(big, mid, lo)
        hi = np.where(big, hi, mid)
    return l1, g - 0.5 * (lo + hi)


def test_gamma_one_is_diagonal(k1, st1):
    r = rate_and_free_energy(k1, st1, 1.0)
    assert r.D == 0.0 and r.free_energy == 2 * st1.g and r.optimizer == (0.0, 0.0)


def test_cramer_matches_dense_boundary_scan(k1, st1):
    r = rate_and_free_energy(k1, st1, 1.5)
    assert r.regime is Regime.CRAMER
    l1, l2 = _k1_dense_boundary(1.5, 1.0, st1.g, st1.lambda1_bar, 10_000)
    assert np.max(l1 + 1.5 * l2) == pytest.approx(r.D, abs=1e-8)
    assert r.residuals["lagrange"] <= 1e-12


def test_non_cramer_plateau(k1, st1):
    for gam in (2.5, 3.0, 7.0):
        r = rate_and_free_energy(k1, st1, gam)
        assert r.regime is Regime.NONCRAMER
        assert r.free_energy == pytest.approx(st1.g - st1.lambda1_bar, rel=1e-14)
        assert r.optimizer == (st1.lambda1_bar, st1.g)
        assert free_energy_derivative(k1, st1, r)[1] == 0.0


@pytest.mark.parametrize("gam", [1.1, 1.5, 1.9, 2.0, 3.0])
def test_free_energy_bounds_and_c_hat(k1, st1, gam):
    r = rate_and_free_energy(k1, st1, gam)
    assert r.D >= 0
    assert 2 * st1.g <= r.free_energy <= (1 + gam) * st1.g
    if r.regime is Regime.CRAMER:
        assert r.c_hat < r.c_of_h


def test_boundary_regime_agrees(k1, st1):
    r = rate_and_free_energy(k1, st1, st1.gamma_c)
    assert r.regime is Regime.BOUNDARY
    assert r.free_energy == pytest.approx(st1.c, rel=1e-12)


def test_h_nonpositive(k1):
    r = rate_and_free_energy(k1, solve_g(k1, -0.5), 1.5)
    assert r.free_energy == 0.0 and math.isnan(r.D)


def test_needs_full_state(k1):
    with pytest.raises(SolverError):
        rate_and_free_energy(k1, solve_g(k1, 1.0), 1.5)


def test_gamma_below_one_by_symmetry(k1, st1):
    r, s = rate_and_free_energy(k1, st1, 0.6), rate_and_free_energy(k1, st1, 1 / 0.6)
    assert r.D == pytest.approx(0.6 * s.D, rel=1e-15)
    assert r.optimizer == (s.optimizer[1], s.optimizer[0])
    x, y = support_point(k1, st1, 1.0, 0.6)
    assert x + 0.6 * y == pytest.approx(r.D, rel=1e-10)


@pytest.mark.parametrize("gam", [1.5, 0.7, 3.0, 0.3])
def test_dF_dh_finite_difference(k1, st1, gam):
    r = rate_and_free_energy(k1, st1, gam)
    dh, _ = free_energy_derivative(k1, st1, r)
    d = 1e-5
    fp = rate_and_free_energy(k1, solve_tilt(k1, 1 + d), gam).free_energy
    fm = rate_and_free_energy(k1, solve_tilt(k1, 1 - d), gam).free_energy
    assert dh == pytest.approx((fp - fm) / (2 * d), rel=1e-6)


@pytest.mark.parametrize("gam", [1.5, 0.7])
def test_dF_dgamma_finite_difference(k1, st1, gam):
    r = rate_and_free_energy(k1, st1, gam)
    _, dg = free_energy_derivative(k1, st1, r)
    d = 1e-5
    fd = (rate_and_free_energy(k1, st1, gam + d).free_energy
          - rate_and_free_energy(k1, st1, gam - d).free_energy) / (2 * d)
    assert dg == pytest.approx(fd, rel=1e-6)
    assert dg == pytest.approx(st1.g - r.optimizer[1], rel=1e-15)


def test_dF_dh_continuous_across_gamma_c():
    # K3 has nonconstant gamma_c; at gamma = gamma_c(h) both formulas must agree
    k = make_k3(2.5, 0.02)
    st_ = solve_tilt(k, 1.0)
    a, b = st_.gamma_c * (1 - 1e-7), st_.gamma_c * (1 + 1e-7)
    ra, rb = rate_and_free_energy(k, st_, a), rate_and_free_energy(k, st_, b)
    assert ra.regime is Regime.CRAMER and rb.regime is Regime.NONCRAMER
    assert free_energy_derivative(k, st_, ra)[0] == pytest.approx(free_energy_derivative(k, st_, rb)[0], rel=1e-6)


@pytest.mark.parametrize("maker,h,gam", [
    (lambda: make_gamma_ratio_kernel(1.5), 1.0, 1.5),
    (lambda: make_k3(2.5, 0.02), 0.7, 1.2),
    (lambda: make_k2(1.5, 0.01), 3.0, 2.2),
    (lambda: make_gamma_ratio_kernel(1.5), 1e-4, 1.5),
])
def test_path_law_normalization(maker, h, gam):
    k = maker()
    st_ = solve_tilt(k, h)
    r = rate_and_free_energy(k, st_, gam)
    assert r.regime is Regime.CRAMER
    assert path_law_mass(k, r) == pytest.approx(1.0, abs=1e-10)


def test_path_law_mass_at_the_corner(k1, st1):
    # above gamma_c the corner sits on q_h = 1 as well, so the mass is still one
    r = rate_and_free_energy(k1, st1, 3.0)
    assert path_law_mass(k1, r) == pytest.approx(1.0, abs=1e-12)


def test_optimizer_on_boundary(k1, st1):
    r = rate_and_free_energy(k1, st1, 1.3)
    y, _ = boundary_curve(k1, st1, r.optimizer[0])
    assert y == pytest.approx(r.optimizer[1], rel=1e-14)


def test_k2_cramer_gap_at_h3():
    k = make_k2(1.5, 0.01)
    st_ = solve_tilt(k, 3.0)
    r = rate_and_free_energy(k, st_, 2.2)
    assert r.regime is Regime.CRAMER
    assert 2e-9 < st_.c - r.c_hat < 1.8e-8


@pytest.mark.parametrize("maker,h", [(lambda: make_gamma_ratio_kernel(1.5), 1.0),
                                     (lambda: make_k3(2.5, 0.02), 2.0)])
def test_d_properties(maker, h):
    k = maker()
    st_ = solve_tilt(k, h)
    gams = [0.25, 0.4, 0.6, 0.8, 1.0, 1.2, 1.5, 1.8, 2.5, 3.0, 4.0]
    rep = d_properties_check(k, st_, gams)
    assert rep.ok, rep.violations
    assert rep.D[rep.gammas == 1.0][0] == 0.0
    assert np.argmin(rep.D) == int(np.flatnonzero(rep.gammas == 1.0)[0])
    assert rep.max_symmetry_error < 1e-9


def test_free_energy_concave_in_gamma(k1, st1):
    gams = np.linspace(0.3, 4.0, 40)
    F = np.array([rate_and_free_energy(k1, st1, g).free_energy for g in gams])
    sd = np.diff(F, 2)
    assert np.all(sd <= 1e-12)
    cram = (gams[1:-1] > 1 / st1.gamma_c + 0.1) & (gams[1:-1] < st1.gamma_c - 0.1)
    assert np.all(sd[cram] < -1e-6)
