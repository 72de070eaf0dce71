import json
import math

import numpy as np
import pytest

from artifact.exact_dp import build_constrained
from artifact.kernels import FreeEndKernel, make_gamma_ratio_kernel, make_k3
from artifact.tilt_solver import solve_tilt
from artifact.validation import (
    CheckReport,
    check_convolution_bound,
    check_free_sharp,
    check_prelim_monotonicity,
    check_renewal_llt,
    check_terminating_sharp,
    merge_reports,
)


@pytest.fixture(scope="module")
def k1():
    return make_gamma_ratio_kernel(1.5)


@pytest.fixture(scope="module")
def neg_table(k1):
    return build_constrained(k1, 120, 180, -0.5)


def _row(rep, cid):
    return next(r for r in rep.rows if r.check_id == cid)


def test_terminating_trend_and_bound(k1, neg_table):
    rep = check_terminating_sharp(k1, -0.5, [30, 60, 120], table=neg_table)
    sharp = _row(rep, "terminating_sharp")
    assert sharp.claimed == pytest.approx(math.exp(-0.5) / math.expm1(-0.5) ** 2)
    assert _row(rep, "terminating_monotone").passed
    assert _row(rep, "terminating_uniform_bound").passed
    # the fitted limit is far closer than the raw ratio
    assert abs(sharp.extrapolated / sharp.claimed - 1) < 0.5 * abs(sharp.measured / sharp.claimed - 1)


def test_terminating_single_jump_dominates(k1):
    # h -> -inf: Z^c ~ e^h K(N+M), so the ratio is e^h (1 + o(1))
    h = -25.0
    rep = check_terminating_sharp(k1, h, [10, 20], gamma=1.0)
    assert _row(rep, "terminating_sharp").measured == pytest.approx(math.exp(h), rel=1e-8)


def test_terminating_needs_negative_h(k1):
    with pytest.raises(ValueError):
        check_terminating_sharp(k1, 0.5, [10, 20])


def test_convolution_constant_stable(k1):
    rep = check_convolution_bound(k1, [8, 16, 32])
    assert rep.passed
    assert rep.rows[0].measured == pytest.approx(math.log2(6.0))


def test_free_sharp_ends_free(k1, neg_table):
    rep = check_free_sharp(k1, FreeEndKernel(0.5, shift=1), -0.5, 1.5, [30, 60, 120], table=neg_table)
    assert rep.rows[0].check_id == "free_sharp_ends_free" and rep.passed


def test_free_sharp_ends_pinned_trend(k1, neg_table):
    rep = check_free_sharp(k1, FreeEndKernel(2.0, shift=1), -0.5, 1.5, [30, 60, 120], table=neg_table)
    row = rep.rows[0]
    assert row.check_id == "free_sharp_ends_pinned"
    assert np.all(np.diff(np.abs(np.array(row.trend) - 1)) < 0)


def test_free_sharp_rejects_boundary_exponent(k1, neg_table):
    with pytest.raises(ValueError):
        check_free_sharp(k1, FreeEndKernel(1.25), -0.5, 1.5, [30, 60], table=neg_table)


def test_free_sharp_cramer_prefactor(k1):
    st = solve_tilt(k1, 1.0)
    rep = check_free_sharp(k1, FreeEndKernel(0.5, shift=1), 1.0, 1.5, [60, 120], state=st)
    assert rep.passed and rep.rows[0].measured > 0


def test_free_sharp_rejects_non_cramer(k1):
    with pytest.raises(ValueError):
        check_free_sharp(k1, FreeEndKernel(0.5), 1.0, 3.0, [10, 20])


@pytest.mark.parametrize("gamma", [1.0, 1.5])
def test_llt_prefactor_stable(k1, gamma):
    rep = check_renewal_llt(k1, solve_tilt(k1, 1.0), gamma, [60, 120])
    assert rep.rows[0].check_id == "renewal_llt_prefactor" and rep.passed


def test_llt_non_cramer_log_rate(k1):
    rep = check_renewal_llt(k1, solve_tilt(k1, 1.0), 3.0, [50, 100, 150, 200])
    row = rep.rows[0]
    assert row.check_id == "renewal_log_rate" and row.passed


def test_prelim_monotonicity():
    k = make_k3(2.5, 0.02)
    assert check_prelim_monotonicity(k, solve_tilt(k, 1.0), 100, 130, samples=50).passed


def test_report_json_schema(k1):
    rep = merge_reports(check_convolution_bound(k1, [8, 16]),
                        check_terminating_sharp(k1, -1.0, [10, 20]))
    assert isinstance(rep, CheckReport)
    rows = json.loads(rep.to_json())
    ids = [r["check_id"] for r in rows]
    assert ids == sorted(ids)
    for r in rows:
        assert {"check_id", "params", "sizes", "measured", "claimed", "tolerance", "pass"} <= set(r)
