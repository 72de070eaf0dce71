"""Phase diagrams in h at fixed gamma: transitions, their order and small-h exponents.

The free energy at fixed gamma is analytic except where gamma_c(h) - gamma
changes sign.  Transitions are located by evaluating gamma_c on a grid and
bisecting each sign change.  A scan is driven by a :class:`ScanModel`, which
maps the scan variable to a kernel and the pinning seen by that kernel; for a
fixed kernel this is the identity, for the biophysics temperature-like scan
the kernel itself depends on the scan variable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .kernels import Kernel, biophysics_scan_kernel, damped_sum
from .ldp import free_energy_derivative, rate_and_free_energy
from .tilt_solver import SolverError, TiltState, solve_tilt

__all__ = [
    "TransitionKind",
    "TransitionOrder",
    "ExponentRegime",
    "TransitionRecord",
    "CriticalExponentReport",
    "ScanModel",
    "gamma_c_slope",
    "jump_second_derivative",
    "scan_transitions",
    "classify_order",
    "small_h_exponent",
    "limit_c_alpha_gamma",
]

TANGENCY_TOL = 1e-6


class TransitionKind(str, Enum):
    DENATURATION = "Denaturation"
    CRAMER_EXIT = "CramerExit"  # gamma_c - gamma goes from + to - as h grows
    CRAMER_ENTRY = "CramerEntry"
    TANGENTIAL = "Tangential"


class TransitionOrder(str, Enum):
    SECOND = "Second"
    THIRD_OR_MORE = "ThirdOrMore"
    NONE = "NoTransition"
    UNDETERMINED = "Undetermined"


class ExponentRegime(str, Enum):
    FINITE_VARIANCE = "FiniteVariance"
    CRAMER_LIMIT = "CramerLimit"
    NON_CRAMER_LIMIT = "NonCramerLimit"


@dataclass(frozen=True)
class TransitionRecord:
    h_star: float
    kind: TransitionKind
    bracket: tuple[float, float]
    gamma: float
    gamma_c_slope: float = math.nan
    order: TransitionOrder = TransitionOrder.UNDETERMINED
    jump: float = 0.0
    jump_fd: float = math.nan


@dataclass(frozen=True)
class CriticalExponentReport:
    alpha: float
    gamma: float
    fitted_exponent: float
    fitted_c_alpha_gamma: float
    regime: ExponentRegime
    c_moment: float = math.nan  # 2 / sum n(n-1) K(n) when finite
    ratio_over_h: float = math.nan  # F_gamma(h)/h at the smallest h
    ill_conditioned: bool = False


@dataclass(frozen=True)
class ScanModel:
    """Maps the scan variable to (kernel, pinning of that kernel)."""

    provider: Callable[[float], tuple[Kernel, float]]
    fixed_kernel: Kernel | None = None
    label: str = ""

    @classmethod
    def fixed(cls, k: Kernel) -> "ScanModel":
        return cls(lambda h: (k, h), k, k.family)

    @classmethod
    def biophysics(cls, c: float, E_b: float, E_l: float) -> "ScanModel":
        return cls(lambda beta: biophysics_scan_kernel(c, E_b, E_l, beta), None, "Biophysics")

    def solve(self, h: float) -> tuple[Kernel, TiltState]:
        k, h_eff = self.provider(h)
        return k, solve_tilt(k, h_eff)

    def gamma_c(self, h: float) -> float:
        return self.solve(h)[1].gamma_c


def _as_model(k) -> ScanModel:
    return k if isinstance(k, ScanModel) else ScanModel.fixed(k)


def _W(k: Kernel, i: int, j: int, c: float) -> float:
    return float(damped_sum(k, i, j, c, 0.0))


def gamma_c_slope(k: Kernel, state: TiltState) -> float:
    """d gamma_c / dh for a fixed kernel.

    gamma_c' = -c' sum n (m - gamma_c n) K e^{-cn} / sum n K e^{-cn} with
    c' = e^{-h} / sum n K e^{-cn}.
    """
    c, gc = state.c, state.gamma_c
    w10 = _W(k, 1, 0, c)
    cp = math.exp(-state.h) / w10
    return -cp * (_W(k, 1, 1, c) - gc * _W(k, 2, 0, c)) / w10


def jump_second_derivative(k: Kernel, state: TiltState, gamma: float) -> float:
    """c_hat'' - c'' at a point where gamma_c(h0) = gamma; needs sum m^2 K < inf.

    -(F')^3 (sum n (m - gamma n) K e^{h - cn})^2 / sum (m - gamma n)^2 K e^{h - cn}.
    """
    c, h = state.c, state.h
    fp = math.exp(-h) / _W(k, 1, 0, c)
    num = _W(k, 1, 1, c) - gamma * _W(k, 2, 0, c)
    den = _W(k, 0, 2, c) - 2 * gamma * _W(k, 1, 1, c) + gamma**2 * _W(k, 2, 0, c)
    if not math.isfinite(den):
        return 0.0
    return -(fp**3) * math.exp(h) * num**2 / den


def _bisect(f, lo: float, hi: float, flo: float, tol_h: float) -> tuple[float, float]:
    # plain bisection keeps a certified bracket
    for _ in range(400):
        if hi - lo <= tol_h:
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid, mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return lo, hi


def _fd_gamma_c_slope(model: ScanModel, h: float, tol_h: float) -> float:
    d = max(1e-5 * h, 100 * tol_h)
    return (model.gamma_c(h + d) - model.gamma_c(h - d)) / (2 * d)


def scan_transitions(k, gamma: float, h_range: tuple[float, float], grid: int = 512,
                     tol_h: float = 1e-8, tangency_tol: float = TANGENCY_TOL,
                     log_grid: bool = True, include_denaturation: bool = False,
                     gamma_c_values: Sequence[float] | None = None) -> list[TransitionRecord]:
    """Locate every sign change of gamma_c(h) - gamma in h_range, plus near-tangencies.

    ``k`` is a Kernel or a ScanModel.  ``gamma_c_values`` may supply precomputed
    grid values (for parallel evaluation by the caller).
    """
    model = _as_model(k)
    lo, hi = h_range
    if not (0 < lo < hi) or grid < 2:
        raise ValueError("need 0 < h_lo < h_hi and grid >= 2")
    hs = np.geomspace(lo, hi, grid) if log_grid else np.linspace(lo, hi, grid)
    gc = np.asarray(gamma_c_values if gamma_c_values is not None else [model.gamma_c(float(h)) for h in hs])
    d = gc - gamma

    def f(h):
        return model.gamma_c(h) - gamma

    out = []
    if include_denaturation:
        out.append(TransitionRecord(0.0, TransitionKind.DENATURATION, (0.0, 0.0), gamma))
    for i in range(grid - 1):
        if d[i] == 0.0 or (d[i] > 0) != (d[i + 1] > 0) and d[i + 1] != 0.0:
            a, b = _bisect(f, float(hs[i]), float(hs[i + 1]), float(d[i]), tol_h)
            kind = TransitionKind.CRAMER_EXIT if d[i] > 0 else TransitionKind.CRAMER_ENTRY
            hstar = 0.5 * (a + b)
            if model.fixed_kernel is not None:
                slope = gamma_c_slope(model.fixed_kernel, model.solve(hstar)[1])
            else:
                slope = _fd_gamma_c_slope(model, hstar, tol_h)
            out.append(TransitionRecord(hstar, kind, (a, b), gamma, slope))
    for i in range(1, grid - 1):
        ext = (d[i] - d[i - 1]) * (d[i + 1] - d[i]) < 0
        same_sign = (d[i - 1] > 0) == (d[i] > 0) == (d[i + 1] > 0)
        if ext and same_sign and abs(d[i]) < tangency_tol:
            out.append(TransitionRecord(float(hs[i]), TransitionKind.TANGENTIAL,
                                        (float(hs[i - 1]), float(hs[i + 1])), gamma))
    return sorted(out, key=lambda r: r.h_star)


def _second_moment_status(k: Kernel) -> bool | None:
    """True/False when sum m^2 K is certainly finite/infinite, None at alpha = 2."""
    if k.alpha > 2.0:
        return True
    if k.alpha < 2.0:
        return False
    return None


def _one_sided_derivative(f, x0: float, f0: float, step: float) -> float:
    # second order one-sided stencil, step may be negative
    return (-3 * f0 + 4 * f(x0 + step) - f(x0 + 2 * step)) / (2 * step)


def classify_order(k, record: TransitionRecord, fd_step: float = 1e-4) -> TransitionRecord:
    """Order of a located sign-change transition, with the jump and its finite-difference check."""
    if record.kind in (TransitionKind.TANGENTIAL, TransitionKind.DENATURATION):
        return record
    model = _as_model(k)
    hstar, gamma = record.h_star, record.gamma
    kern, st = model.solve(hstar)
    if record.gamma_c_slope == 0.0:
        return replace(record, order=TransitionOrder.THIRD_OR_MORE, jump=0.0)
    finite = _second_moment_status(kern)
    if finite is None:
        return replace(record, order=TransitionOrder.UNDETERMINED)
    if not finite:
        return replace(record, order=TransitionOrder.THIRD_OR_MORE, jump=0.0)
    if model.fixed_kernel is None:
        # the closed-form jump assumes a kernel independent of h
        return replace(record, order=TransitionOrder.SECOND, jump=math.nan)
    jump = jump_second_derivative(kern, st, gamma)

    def dF(h):
        s = solve_tilt(kern, h)
        return free_energy_derivative(kern, s, rate_and_free_energy(kern, s, gamma))[0]

    # both formulas agree at h*; take one-sided second derivatives of F on each side
    f0 = dF(hstar)
    right = _one_sided_derivative(dF, hstar, f0, fd_step)
    left = _one_sided_derivative(dF, hstar, f0, -fd_step)
    # Cramer side is where gamma_c > gamma
    cramer_right = record.kind is TransitionKind.CRAMER_ENTRY
    jump_fd = (right - left) if cramer_right else (left - right)
    return replace(record, order=TransitionOrder.SECOND, jump=jump, jump_fd=jump_fd)


def small_h_exponent(k: Kernel, gamma: float, h_grid: Sequence[float]) -> CriticalExponentReport:
    """Fit log F_gamma(h) against log h and the small-h constant."""
    hs = np.asarray(h_grid, dtype=float)
    if np.any(hs <= 0):
        raise ValueError("h_grid must be positive")
    F, F1 = [], []
    for h in hs:
        st = solve_tilt(k, float(h))
        F.append(rate_and_free_energy(k, st, gamma).free_energy)
        F1.append(2.0 * st.g)
    F, F1 = np.array(F), np.array(F1)
    ill = hs.size < 3 or float(np.max(hs) / np.min(hs)) < 10.0
    slope = float(np.polyfit(np.log(hs), np.log(F), 1)[0]) if hs.size >= 2 else math.nan
    i0 = int(np.argmin(hs))
    alpha = k.alpha
    if _second_moment_status(k):
        s = k.moments(0.0, 2)
        second = float(s[2] - s[1])  # sum n(n-1) K(n)
        return CriticalExponentReport(alpha, gamma, slope, float(F[i0] / F1[i0]),
                                      ExponentRegime.FINITE_VARIANCE, 2.0 / second,
                                      float(F[i0] / hs[i0]), ill)
    reg = ExponentRegime.CRAMER_LIMIT if gamma < 1.0 / (alpha - 1.0) else ExponentRegime.NON_CRAMER_LIMIT
    return CriticalExponentReport(alpha, gamma, slope, float(F[i0] / F1[i0]), reg,
                                  ratio_over_h=float(F[i0] / hs[i0]), ill_conditioned=ill)


def limit_c_alpha_gamma(alpha: float, gamma: float) -> float:
    """Small-h constant c_{alpha,gamma} = lim F_gamma / F_1 for 1 < alpha < 2.

    Inside the limit Cramer region (1 <= gamma < 1/(alpha-1)) it minimizes
    (a1 + gamma a2)/2 subject to (a1^alpha - a2^alpha)/(a1 - a2) = alpha; the
    Lagrange condition gives a2^(alpha-1) = 1 - gamma (a1^(alpha-1) - 1).
    Outside it the corner value alpha^(1/(alpha-1))/2 is returned.
    """
    if not 1.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (1, 2)")
    if gamma < 1.0:
        return gamma * limit_c_alpha_gamma(alpha, 1.0 / gamma)
    p = alpha - 1.0
    if gamma >= 1.0 / p:
        return alpha ** (1.0 / p) / 2.0
    if gamma == 1.0:
        return 1.0

    def parts(eps):
        # a1 = 1 + eps; log a1, log a2 and a2^p without cancellation near eps = 0
        la1 = math.log1p(eps)
        u = math.expm1(p * la1)  # a1^p - 1
        a2p = 1.0 - gamma * u
        return la1, a2p

    def r(eps):
        la1, a2p = parts(eps)
        if a2p <= 0.0:
            return math.exp(p * la1) - alpha  # a2 = 0: b = a1^p
        L = la1 - math.log(a2p) / p  # log(a1 / a2)
        return a2p * math.expm1(alpha * L) / math.expm1(L) - alpha

    top = min((1.0 + 1.0 / gamma) ** (1.0 / p), alpha ** (1.0 / p)) - 1.0
    # r < 0 just above the trivial root a1 = 1 and r > 0 at the top
    es = top * np.geomspace(1e-12, 1.0, 400)
    rs = np.array([r(e) for e in es])
    idx = np.flatnonzero((rs[:-1] < 0) & (rs[1:] >= 0))
    if idx.size == 0:
        raise SolverError("limit Lagrange system: no bracket", (1.0, 1.0 + top))
    eps = brentq(r, es[idx[0]], es[idx[0] + 1], xtol=1e-300, rtol=4 * np.finfo(float).eps)
    _, a2p = parts(eps)
    return 0.5 * (1.0 + eps + gamma * max(a2p, 0.0) ** (1.0 / p))
