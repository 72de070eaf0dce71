"""Tilt g(h), boundary multiplier lambda1_bar(h) and the boundary curve of q_h = 1.

All three quantities solve an equation of the form Q(x) = exp(-h) for a damped
sum Q that is monotone in the unknown.  They are solved as log Q(x) + h = 0,
with log Q taken from the deficit 1 - Q when Q is close to one so that small h
keeps full relative precision.  Notation: a = g - lambda1, b = g - lambda2, so

    q_h(lambda1, lambda2) = exp(h) * sum_{n,m} K(n+m) exp(-a n - b m).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .kernels import SERIES_CUTOFF, Kernel, _series_horizon, damped_deficit, damped_sum

__all__ = [
    "TiltState",
    "BoundaryCurve",
    "SolverError",
    "solve_g",
    "solve_tilt",
    "q_h_eval",
    "solve_lambda1_bar",
    "gamma_c",
    "boundary_curve",
    "sample_boundary",
]

TOL_ROOT = 1e-12
_MAX_DOUBLINGS = 200


class SolverError(RuntimeError):
    """Root-finding failure; carries the last bracket."""

    def __init__(self, msg: str, bracket: tuple[float, float] | None = None):
        super().__init__(f"{msg} (bracket {bracket})" if bracket else msg)
        self.bracket = bracket


@dataclass(frozen=True)
class TiltState:
    """Per-h solution.  lambda1_bar and gamma_c are nan until solved (and for h <= 0).

    ``horizon`` is the truncation used for the series at damping g, or 0 when
    the closed form was used.
    """

    h: float
    g: float
    lambda1_bar: float = math.nan
    gamma_c: float = math.nan
    residuals: dict = field(default_factory=dict)
    horizon: int = 0

    @property
    def c(self) -> float:
        """c(h) = g(h) - lambda1_bar(h)."""
        return self.g - self.lambda1_bar


@dataclass(frozen=True)
class BoundaryCurve:
    h: float
    lambda1: np.ndarray
    lambda2: np.ndarray
    dlambda2: np.ndarray


def _log_q(deficit: float, direct) -> float:
    # log Q with Q = 1 - deficit; fall back to the direct sum when Q is small
    if deficit < 0.5:
        return math.log1p(-deficit)
    return math.log(direct())


def _solve_increasing(F, dF, lo: float, hi: float, what: str) -> float:
    """Root of an increasing F on [lo, hi], then Newton polish with dF."""
    flo, fhi = F(lo), F(hi)
    if flo > 0 or fhi < 0:
        raise SolverError(f"{what}: root not bracketed", (lo, hi))
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    x = brentq(F, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)
    fx = F(x)
    for _ in range(3):
        d = dF(x)
        if not (d > 0 and math.isfinite(d)):
            break
        xn = x - fx / d
        if not (lo <= xn <= hi):
            break
        fn = F(xn)
        if abs(fn) >= abs(fx):
            break
        x, fx = xn, fn
    return x


def _expand_up(F, lo: float, start: float, what: str) -> float:
    hi = max(start, lo + 1e-3)
    for _ in range(_MAX_DOUBLINGS):
        if F(hi) >= 0:
            return hi
        hi = lo + 2.0 * (hi - lo)
    raise SolverError(f"{what}: no upper bracket", (lo, hi))


def solve_g(k: Kernel, h: float, tol_root: float = TOL_ROOT) -> TiltState:
    """g(h): zero for h <= 0, else the root of sum_t (t-1) K(t) exp(h - t g) = 1."""
    if h <= 0:
        return TiltState(h=h, g=0.0, residuals={"g": 0.0})
    target = -math.expm1(-h)

    def F(g):  # -log(exp(h) * sum_t (t-1) K(t) e^{-t g}), increasing in g
        return -(_log_q(k.tilt_deficit(g), lambda: k.tilt_sum(g)) + h)

    def dF(g):
        s = k.moments(g, 2)
        return float(s[2] - s[1]) / k.tilt_sum(g)

    # the deficit behaves like g^(alpha-1) near zero: start from that scale
    lo = 0.0
    hi = _expand_up(F, lo, min(1.0, target ** (1.0 / max(k.alpha - 1.0, 0.5))), "g(h)")
    # shrink the bracket geometrically so brentq starts at the right scale
    while hi > 1e-300 and F(0.5 * hi) > 0:
        hi *= 0.5
    lo = 0.5 * hi if F(0.5 * hi) <= 0 else 0.0
    g = _solve_increasing(F, dF, lo, hi, "g(h)")
    res = abs(math.expm1(F(g)))
    if res > tol_root:
        raise SolverError(f"g(h) residual {res:.3e} exceeds tolerance", (lo, hi))
    horizon = _series_horizon(g, 2) if g >= SERIES_CUTOFF else 0
    return TiltState(h=h, g=g, residuals={"g": res}, horizon=horizon)


def q_h_eval(k: Kernel, state: TiltState, lambda1: float, lambda2: float) -> float:
    """q_h(lambda1, lambda2); +inf outside (-inf, g]^2."""
    g = state.g
    if lambda1 > g or lambda2 > g:
        return math.inf
    return math.exp(state.h) * damped_sum(k, 0, 0, g - lambda1, g - lambda2)


def _boundary_F(k: Kernel, h: float):
    # log q_h as a function of (a, b), increasing when a or b decreases
    def F(a, b):
        return _log_q(damped_deficit(k, a, b), lambda: damped_sum(k, 0, 0, a, b)) + h

    return F


def solve_lambda1_bar(k: Kernel, state: TiltState, tol_root: float = TOL_ROOT) -> float:
    """The lambda1 < 0 with q_h(lambda1, g) = 1."""
    h, g = state.h, state.g
    if h <= 0:
        raise SolverError("lambda1_bar is defined for h > 0 only")
    F2 = _boundary_F(k, h)

    def F(c):  # increasing in c = g - lambda1
        return -F2(c, 0.0)

    def dF(c):
        return damped_sum(k, 1, 0, c, 0.0) / damped_sum(k, 0, 0, c, 0.0)

    # q_h(0, g) >= q_h(0, 0) = 1, so the root has c >= g
    lo = g
    hi = _expand_up(F, lo, 2.0 * g + 1.0, "lambda1_bar")
    while hi - lo > 1e-300 and F(lo + 0.5 * (hi - lo)) > 0:
        hi = lo + 0.5 * (hi - lo)
    c = _solve_increasing(F, dF, lo, hi, "lambda1_bar")
    res = abs(math.expm1(F2(c, 0.0)))
    if res > tol_root:
        raise SolverError(f"lambda1_bar residual {res:.3e} exceeds tolerance", (lo, hi))
    return g - c


def gamma_c(k: Kernel, state: TiltState) -> float:
    """sum m K e^{-c n} / sum n K e^{-c n} at c = g - lambda1_bar; inf when alpha <= 1."""
    if state.h <= 0:
        return math.nan
    if k.alpha <= 1.0:
        return math.inf
    c = state.c
    return float(damped_sum(k, 0, 1, c, 0.0) / damped_sum(k, 1, 0, c, 0.0))


def solve_tilt(k: Kernel, h: float, tol_root: float = TOL_ROOT) -> TiltState:
    """g, lambda1_bar and gamma_c at h."""
    st = solve_g(k, h, tol_root)
    if h <= 0:
        return st
    l1 = solve_lambda1_bar(k, st, tol_root)
    st = replace(st, lambda1_bar=l1)
    res = dict(st.residuals)
    res["lambda1_bar"] = abs(q_h_eval(k, st, l1, st.g) - 1.0)
    return replace(st, gamma_c=gamma_c(k, st), residuals=res)


def boundary_curve(k: Kernel, state: TiltState, lambda1: float,
                   tol_root: float = TOL_ROOT) -> tuple[float, float]:
    """(lambda2, dlambda2/dlambda1) on q_h = 1 for lambda1 in [lambda1_bar, g].

    The part over [lambda1_bar, 0] bounds B_h; the rest is its mirror image.
    """
    h, g, l1bar = state.h, state.g, state.lambda1_bar
    if h <= 0 or math.isnan(l1bar):
        raise SolverError("boundary curve needs a solved state with h > 0")
    span = abs(l1bar)
    if not (l1bar - 1e-12 * span <= lambda1 <= g + 1e-12 * span):
        raise SolverError(f"lambda1 = {lambda1} outside [{l1bar}, {g}]")
    lambda1 = min(max(lambda1, l1bar), g)
    a = g - lambda1
    if lambda1 == 0.0:
        b = g
    elif lambda1 == l1bar:
        b = 0.0
    elif lambda1 == g:
        b = state.c
    else:
        F2 = _boundary_F(k, h)

        def F(b):  # increasing as b decreases: solve in -b
            return F2(a, b)

        def root(b):
            return -F(b)

        def dF(b):
            return damped_sum(k, 0, 1, a, b) / damped_sum(k, 0, 0, a, b)

        lo, hi = (0.0, g) if lambda1 < 0 else (g, state.c)
        if root(lo) > 0:
            b = lo
        elif root(hi) < 0:
            b = hi
        else:
            b = _solve_increasing(root, dF, lo, hi, "boundary curve")
        res = abs(math.expm1(F(b)))
        if res > tol_root:
            raise SolverError(f"boundary residual {res:.3e} exceeds tolerance", (lo, hi))
    lam2 = g - b
    d = -damped_sum(k, 1, 0, a, b) / damped_sum(k, 0, 1, a, b)
    return lam2, d


def sample_boundary(k: Kernel, state: TiltState, npts: int = 100) -> BoundaryCurve:
    l1 = np.linspace(state.lambda1_bar, 0.0, npts)
    out = np.array([boundary_curve(k, state, float(x)) for x in l1])
    return BoundaryCurve(state.h, l1, out[:, 0], out[:, 1])
