import json
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn
from scipy.special import gammaln, zeta

from artifact.kernels import (
    FreeEndKernel,
    KernelError,
    biophysics_scan_kernel,
    damped_deficit,
    damped_sum,
    kernel_from_spec,
    kernel_moment,
    kernel_to_spec,
    make_biophysics_kernel,
    make_gamma_ratio_kernel,
    make_k2,
    make_k3,
    make_power_law_kernel,
    make_tabulated_kernel,
)


@pytest.fixture(scope="module")
def k1():
    return make_gamma_ratio_kernel(1.5)


def _normalization_with_tail(k, T):
    t = np.arange(T + 1, dtype=float)
    v = k.values(T)
    partial = math.fsum((t[2:] - 1.0) * v[2:])
    return partial, k.tail_bound(T, 1).epsilon_tail


def test_k1_normalization_at_large_horizon(k1):
    partial, tail = _normalization_with_tail(k1, 10**6)
    assert tail < 1e-2
    # the exact tail is positive and below the certified bound
    assert 0.0 < 1.0 - partial <= tail
    assert abs(k1.normalization_defect()) < 1e-12


def test_k1_first_value_matches_gamma_functions(k1):
    direct = gamma_fn(2 - 1.5) / (gamma_fn(-1.5) * 2.0)
    assert k1.at(2) == pytest.approx(direct, rel=1e-14)


def test_k1_stirling_limit_is_approached_monotonically(k1):
    target = 1.0 / abs(gamma_fn(-1.5))
    ratios = [k1.at(n) * n**2.5 for n in (10**3, 10**4, 10**5)]
    gaps = [abs(r - target) for r in ratios]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] / target < 1e-4


def test_k1_recurrence_matches_log_gamma(k1):
    n = np.arange(2, 10_001)
    ref = gammaln(n - 1.5) - gammaln(n + 1.0) - math.log(abs(gamma_fn(-1.5)))
    assert np.max(np.abs(k1.log_values(10_000)[2:] - ref)) < 1e-10


def test_gamma_ratio_domain():
    for a in (1.0, 2.0, 0.5, 2.5):
        with pytest.raises(KernelError):
            make_gamma_ratio_kernel(a)


def test_k2_constant_matches_formula(k1):
    kappa = 0.01
    k2 = make_k2(1.5, kappa)
    c = (1 - k1.at(2) - 2 * kappa) / (1 - k1.at(2) - 2 * k1.at(3))
    assert k2.params["c"] == pytest.approx(c, rel=1e-14)
    assert k2.at(3) == kappa and k2.at(2) == k1.at(2)
    assert k2.at(7) == pytest.approx(c * k1.at(7), rel=1e-14)
    assert abs(k2.normalization_defect()) < 1e-12


def test_k2_identity_case(k1):
    k2 = make_k2(1.5, k1.at(3))
    assert k2.params["c"] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k2.values(200), k1.values(200), rtol=1e-14)


def test_k3_normalization_and_sign():
    k3 = make_k3(2.5, 0.02)
    assert k3.params["c"] < 0  # the alpha = 2.5 gamma-ratio base is itself signed
    assert np.all(k3.values(5000)[2:] > 0)
    assert abs(k3.normalization_defect()) < 1e-12
    partial, tail = _normalization_with_tail(k3, 10**5)
    assert abs(1.0 - partial) <= tail


def test_renormalization_must_stay_positive():
    with pytest.raises(KernelError):
        make_k2(1.5, 0.6)  # 2 kappa > 1 - K(2)


def test_biophysics_scan_without_loop_penalty_is_pure_power_law():
    c = 2.15
    k, h_eff = biophysics_scan_kernel(c, 6.0, 0.0, 0.7)
    cK = zeta(c - 1) - zeta(c)
    t = np.arange(2, 500)
    np.testing.assert_allclose(k.values(499)[2:], t**-c / cK, rtol=1e-13)
    assert h_eff == pytest.approx(0.7 * 6.0, rel=1e-14)


@pytest.mark.parametrize("convention", ["strict", "scan"])
def test_biophysics_normalization(convention):
    k, _ = make_biophysics_kernel(2.15, 6.0, 3.0, 1.3, convention)
    assert abs(k.normalization_defect()) < 1e-12
    assert abs(damped_sum(k, 0, 0, 0.0, 0.0) - 1.0) < 1e-12


def test_biophysics_strict_weights():
    c, Eb, El, beta = 2.15, 6.0, 3.0, 0.4
    k, off = make_biophysics_kernel(c, Eb, El, beta)
    assert math.exp(off) * k.at(2) == pytest.approx(math.exp(beta * Eb), rel=1e-13)
    for t in (3, 4, 17):
        assert math.exp(off) * k.at(t) == pytest.approx(math.exp(beta * (Eb - El)) * (t - 2.0) ** -c, rel=1e-13)


def test_biophysics_requires_c_above_two():
    with pytest.raises(KernelError):
        make_biophysics_kernel(2.0, 6.0, 3.0, 1.0)


def test_kernel_moment_normalization(k1):
    assert kernel_moment(k1, 0, 0.0) == pytest.approx(1.0, abs=1e-14)


def test_kernel_moment_matches_naive_double_sum(k1):
    # n <= 2000 with e^{-0.1 n}; the m-tail beyond 2000 is added exactly from
    # sum_{t>=2} K1(t) = alpha - 1
    L = 2000
    v = k1.values(2 * L + 2)
    cum = np.concatenate([[0.0], np.cumsum(v)])
    n = np.arange(1, L + 1)
    inner = np.array([math.fsum(v[i + 1 : i + L + 1]) for i in n])
    tail = (1.5 - 1.0) - cum[n + L + 1]
    naive = math.fsum(np.exp(-0.1 * n) * (inner + tail))
    assert kernel_moment(k1, 0, 0.1) == pytest.approx(naive, rel=1e-10)


def test_kernel_moment_large_damping_limit(k1):
    # sum_n n K(n+m) e^{-xn} ~ e^{-x} sum_m K(1+m), and sum_{t>=2} K1(t) = alpha - 1
    x = 30.0
    got = kernel_moment(k1, 1, x, "FirstCoordinate")
    assert got / math.exp(-x) == pytest.approx(0.5, rel=1e-6)


def test_kernel_moment_divergence_is_a_value(k1):
    assert kernel_moment(k1, 2, 0.1, "SecondCoordinate") == math.inf
    with pytest.raises(KernelError):
        kernel_moment(k1, 0, -0.1)


def _k1_generating(al):
    def Q(a, b):
        x, y = mp.e ** (-a), mp.e ** (-b)
        f = lambda z: ((1 - z) ** al - 1 + al * z) / z
        if a == b:
            return x * x * mp.diff(f, x)
        return x * y * (f(y) - f(x)) / (y - x)

    return Q


@pytest.mark.parametrize("a,b", [("1e-9", "1e-5"), ("1e-5", "3e-5"), ("1e-7", "1.0001e-7"), ("0.3", "0.1"),
                                 ("2e-3", "0.7"), ("0.6", "0.61"), ("12", "1e-3")])
def test_damped_sums_against_high_precision_oracle(k1, a, b):
    mp.mp.dps = 50
    Q = _k1_generating(mp.mpf("1.5"))
    A, B = mp.mpf(a), mp.mpf(b)
    for i, j in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2)]:
        ref = (-1) ** (i + j) * mp.diff(Q, (A, B), (i, j))
        assert damped_sum(k1, i, j, float(a), float(b)) == pytest.approx(float(ref), rel=2e-13)
    ref = 1 - Q(A, B)
    assert damped_deficit(k1, float(a), float(b)) == pytest.approx(float(ref), rel=1e-13)


def _naive(k, i, j, a, b, L=2500):
    v = k.values(2 * L + 2)
    n = np.arange(1, L + 1.0)[:, None]
    m = np.arange(1, L + 1.0)[None, :]
    return np.sum(n**i * m**j * v[(n + m).astype(int)] * np.exp(-a * n - b * m))


@pytest.mark.parametrize("maker", [
    lambda: make_k3(2.5, 0.02),
    lambda: make_k2(1.5, 0.01),
    lambda: make_biophysics_kernel(2.15, 6.0, 3.0, 1.0)[0],
    lambda: make_power_law_kernel(1.5, [(3, 0.01)]),
])
def test_anti_diagonal_collapse_all_families(maker):
    k = maker()
    for a, b in [(0.05, 0.03), (0.2, 0.05), (0.04, 0.041), (0.8, 0.02)]:
        for i in range(3):
            for j in range(3 - i):
                assert damped_sum(k, i, j, a, b) == pytest.approx(_naive(k, i, j, a, b), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 3.0), st.floats(1e-6, 3.0), st.integers(0, 2), st.integers(0, 2))
def test_damped_sum_symmetry(a, b, i, j):
    k = make_k3(2.5, 0.02)
    x, y = damped_sum(k, i, j, a, b), damped_sum(k, j, i, b, a)
    assert x == pytest.approx(y, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 2.0), st.floats(1e-6, 2.0), st.floats(1.01, 3.0))
def test_damped_sum_decreasing_in_damping(a, b, f):
    k = make_gamma_ratio_kernel(1.5)
    assert damped_sum(k, 0, 0, a * f, b) < damped_sum(k, 0, 0, a, b)


def test_tail_bound_is_valid(k1):
    T = 4096
    tb = k1.tail_bound(T, 0)
    exact = (1.5 - 1.0) - math.fsum(k1.values(T)[2:])
    assert 0 < exact <= tb.epsilon_tail
    assert k1.horizon_for(1e-6) >= 64


@pytest.mark.parametrize("k", [
    make_gamma_ratio_kernel(1.5),
    make_k2(1.5, 0.01),
    make_k3(2.5, 0.02),
    make_power_law_kernel(1.7),
    make_biophysics_kernel(2.15, 6.0, 3.0, 1.676, "scan")[0],
    make_tabulated_kernel([0.3, 0.1, 0.05], 1.5, 0.2),
])
def test_spec_round_trip(k):
    spec = json.loads(json.dumps(kernel_to_spec(k)))
    k2 = kernel_from_spec(spec)
    np.testing.assert_array_equal(k.values(300), k2.values(300))
    assert k.hash() == k2.hash()


def test_malformed_spec():
    with pytest.raises(KernelError):
        kernel_from_spec({"family": "Nope"})
    with pytest.raises(KernelError):
        kernel_from_spec({"family": "GammaRatio", "parameters": {}})


def test_free_end_kernel():
    kf = FreeEndKernel(0.5)
    assert kf.values(3)[0] == 1.0
    assert kf.regime(1.5) == "EndsFree"
    assert FreeEndKernel(2.0).regime(1.5) == "EndsPinned"
    assert FreeEndKernel(1.25).regime(1.5) == "Boundary"
    kf = FreeEndKernel(2.0, shift=1)
    assert kf.values(2)[1] == 2.0**-2
    assert kf.total() == pytest.approx(1 + zeta(2.0, 2.0), rel=1e-14)


@pytest.mark.parametrize("a,b", [("1e-9", "0"), ("2e-7", "0"), ("1e-6", "3e-7"), ("1e-4", "0")])
def test_power_law_deficit_at_tiny_damping(a, b):
    # sum_{n,m} K(n+m) y^n z^m = sum_t K(t) yz (y^(t-1) - z^(t-1)) / (y - z), with
    # sum_t t^-s w^t = polylog(s, w)
    k, _ = biophysics_scan_kernel(2.15, 6.0, 3.0, 0.05)
    mp.mp.dps = 60
    s = mp.mpf(k.base.s)
    y, z = mp.e ** (-mp.mpf(a)), mp.e ** (-mp.mpf(b))

    def G(w):  # sum_{t >= 2} K(t) w^t
        tot = k.scale * (mp.polylog(s, w) - w)
        for t, v in k.overrides.items():
            tot += (v - k.scale * mp.mpf(t) ** (-s)) * w**t
        return tot

    Q = (G(y) / y - G(z) / z) * y * z / (y - z)
    assert damped_deficit(k, float(a), float(b)) == pytest.approx(float(1 - Q), rel=1e-11)
