"""Second deviation function D_h(1, gamma) and the constrained free energy.

D_h(1, gamma) is the maximum of lambda1 + gamma lambda2 over B_h, the region
under the concave curve q_h = 1 with lambda1 <= 0 <= lambda2.  For gamma >= 1
the maximizer either solves the slope condition lambda2'(lambda1) = -1/gamma
(Cramer regime) or sits at the corner (lambda1_bar, g) (non-Cramer regime).
The free energy per unit of the shorter strand is (1 + gamma) g - D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import brentq

from .kernels import Kernel, damped_sum
from .tilt_solver import SolverError, TiltState, boundary_curve

__all__ = [
    "Regime",
    "RateResult",
    "DPropertiesReport",
    "rate_and_free_energy",
    "free_energy_derivative",
    "support_point",
    "path_law_mass",
    "d_properties_check",
]

# relative width of the band around gamma_c classified as Boundary
GAMMA_C_RTOL = 1e-9
_AGREE_TOL = 1e-8


class Regime(str, Enum):
    CRAMER = "Cramer"
    NONCRAMER = "NonCramer"
    BOUNDARY = "Boundary"


@dataclass(frozen=True)
class RateResult:
    h: float
    gamma: float
    regime: Regime | None
    D: float
    optimizer: tuple[float, float]
    free_energy: float
    c_of_h: float
    c_hat: float
    g: float = 0.0
    gamma_c: float = math.nan
    residuals: dict = field(default_factory=dict)

    @property
    def a(self) -> float:
        """Damping g - lambda1 of the first coordinate at the optimizer."""
        return self.g - self.optimizer[0]

    @property
    def b(self) -> float:
        """Damping g - lambda2 of the second coordinate at the optimizer."""
        return self.g - self.optimizer[1]


def _slope_root(k: Kernel, state: TiltState, target: float, lo: float, hi: float) -> float:
    """lambda1 in [lo, hi] where the (decreasing) curve slope equals target."""

    def psi(x):
        return boundary_curve(k, state, x)[1] - target

    plo, phi = psi(lo), psi(hi)
    if plo <= 0:
        return lo
    if phi >= 0:
        return hi
    try:
        return brentq(psi, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)
    except (RuntimeError, ValueError) as exc:
        raise SolverError(f"slope condition did not converge: {exc}", (lo, hi)) from exc


def support_point(k: Kernel, state: TiltState, w1: float, w2: float) -> tuple[float, float]:
    """Maximizer of w1 lambda1 + w2 lambda2 over the whole curve q_h = 1, lambda1 in [lambda1_bar, g].

    Used directly, without the symmetry reduction, so it also serves as an
    independent check of it.  Requires w1, w2 > 0.
    """
    if not (w1 > 0 and w2 > 0):
        raise ValueError("weights must be positive")
    target = -w1 / w2
    if target >= -1.0:
        x = _slope_root(k, state, target, state.lambda1_bar, 0.0)
    else:
        x = _slope_root(k, state, target, 0.0, state.g)
    return x, boundary_curve(k, state, x)[0]


def _check_state(state: TiltState) -> None:
    if state.h > 0 and math.isnan(state.lambda1_bar):
        raise SolverError("rate_and_free_energy needs solve_tilt output, not solve_g")


def _rate_ge1(k: Kernel, state: TiltState, gamma: float) -> RateResult:
    g, l1bar, gc = state.g, state.lambda1_bar, state.gamma_c
    c = state.c
    corner = RateResult(state.h, gamma, Regime.NONCRAMER, l1bar + gamma * g, (l1bar, g),
                        c, c, math.nan, g, gc, {"lagrange": 0.0})
    if gamma == 1.0:
        return RateResult(state.h, 1.0, Regime.CRAMER, 0.0, (0.0, 0.0), 2.0 * g, c, 2.0 * g,
                          g, gc, {"lagrange": 0.0})
    if gamma > gc * (1 + GAMMA_C_RTOL):
        return corner
    x = _slope_root(k, state, -1.0 / gamma, l1bar, 0.0)
    y, d = boundary_curve(k, state, x)
    a, b = g - x, g - y
    F = a + gamma * b
    res = {"lagrange": float(abs(d + 1.0 / gamma))}
    if gamma >= gc * (1 - GAMMA_C_RTOL):
        if abs(F - c) > _AGREE_TOL * max(1.0, c):
            raise SolverError(f"Boundary regime: Cramer value {F!r} and plateau {c!r} disagree")
        return RateResult(state.h, gamma, Regime.BOUNDARY, l1bar + gamma * g, (l1bar, g), c, c, F,
                          g, gc, res)
    return RateResult(state.h, gamma, Regime.CRAMER, x + gamma * y, (x, y), F, c, F, g, gc, res)


def rate_and_free_energy(k: Kernel, state: TiltState, gamma: float) -> RateResult:
    """D_h(1, gamma), the regime and the free energy (1 + gamma) g - D.

    For h <= 0 the free energy is 0 and D is undefined (nan).  gamma < 1 is
    reduced to 1/gamma with the coordinates swapped, D(1, gamma) = gamma D(1, 1/gamma).
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if state.h <= 0:
        return RateResult(state.h, gamma, None, math.nan, (math.nan, math.nan), 0.0, 0.0, math.nan)
    _check_state(state)
    if gamma >= 1.0:
        return _rate_ge1(k, state, gamma)
    r = _rate_ge1(k, state, 1.0 / gamma)
    x, y = r.optimizer
    c_hat = gamma * r.c_hat if r.regime is not Regime.NONCRAMER else math.nan
    return RateResult(state.h, gamma, r.regime, gamma * r.D, (y, x), gamma * r.free_energy,
                      r.c_of_h, c_hat, r.g, r.gamma_c, r.residuals)


def free_energy_derivative(k: Kernel, state: TiltState, result: RateResult) -> tuple[float, float]:
    """(dF/dh, dF/dgamma) from the closed forms at the optimizer.

    dF/dh = e^{-h} / sum n K(n+m) e^{-a n - b m} for gamma >= 1 (with a = c,
    b = 0 on the plateau); dF/dgamma = g - lambda2 in every regime, which is 0
    on the plateau.
    """
    if state.h <= 0:
        raise SolverError("free_energy_derivative needs h > 0")
    a, b = result.a, result.b
    e = math.exp(-state.h)
    if result.gamma >= 1.0:
        dh = e / float(damped_sum(k, 1, 0, a, b))
    else:
        # F(gamma) = gamma F(1/gamma) with the roles of the coordinates swapped
        dh = result.gamma * e / float(damped_sum(k, 0, 1, a, b))
    return dh, b


def path_law_mass(k: Kernel, result: RateResult) -> float:
    """Total mass of the limit inter-arrival law e^h K(i+j) e^{-i(F - gamma dF) - j dF}.

    With dF = dF/dgamma, F - gamma dF = a and dF = b, so the mass is q_h at
    the optimizer and equals 1 in the Cramer regime.
    """
    return math.exp(result.h) * float(damped_sum(k, 0, 0, result.a, result.b))


@dataclass
class DPropertiesReport:
    h: float
    gammas: np.ndarray
    D: np.ndarray
    max_symmetry_error: float = 0.0
    max_homogeneity_error: float = 0.0
    min_second_difference: float = math.inf
    max_affine_defect: float = 0.0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _second_differences(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    s = np.diff(y) / np.diff(x)
    return np.diff(s) / (0.5 * (x[2:] - x[:-2]))


def d_properties_check(k: Kernel, state: TiltState, samples, tol: float = 1e-9) -> DPropertiesReport:
    """Check symmetry, homogeneity, convexity, subadditivity and the affine tail of gamma -> D_h(1, gamma)."""
    if state.h <= 0:
        raise SolverError("d_properties_check needs h > 0")
    gam = np.unique(np.asarray(samples, dtype=float))
    D = np.array([rate_and_free_energy(k, state, float(x)).D for x in gam])
    rep = DPropertiesReport(state.h, gam, D)
    scale = max(1.0, float(np.max(np.abs(D))))

    def direct(w1, w2):
        x, y = support_point(k, state, w1, w2)
        return w1 * x + w2 * y

    if 1.0 in gam and abs(D[gam == 1.0][0]) > tol:
        rep.violations.append(f"D(1,1) = {D[gam == 1.0][0]:.3e} is not 0")
    if np.any(D < -tol * scale):
        rep.violations.append("negative D")
    for x, d in zip(gam, D):
        # symmetry: the reduced value against a direct maximization of (1/x, 1)
        err = abs(d - x * direct(1.0, 1.0 / x)) if x != 1.0 else 0.0
        rep.max_symmetry_error = max(rep.max_symmetry_error, err)
        err = abs(direct(2.5, 2.5 * x) - 2.5 * d)
        rep.max_homogeneity_error = max(rep.max_homogeneity_error, err)
    if rep.max_symmetry_error > tol * scale:
        rep.violations.append(f"symmetry error {rep.max_symmetry_error:.3e}")
    if rep.max_homogeneity_error > tol * scale:
        rep.violations.append(f"homogeneity error {rep.max_homogeneity_error:.3e}")
    if gam.size >= 3:
        sd = _second_differences(gam, D)
        rep.min_second_difference = float(np.min(sd))
        if rep.min_second_difference < -tol * scale:
            rep.violations.append(f"convexity: second difference {rep.min_second_difference:.3e}")
        above = gam > state.gamma_c * (1 + GAMMA_C_RTOL)
        inv = gam < (1 - GAMMA_C_RTOL) / state.gamma_c
        for mask in (above, inv):
            if mask.sum() >= 3:
                rep.max_affine_defect = max(rep.max_affine_defect,
                                            float(np.max(np.abs(_second_differences(gam[mask], D[mask])))))
        if rep.max_affine_defect > tol * scale:
            rep.violations.append(f"affine tail defect {rep.max_affine_defect:.3e}")
    # subadditivity on pairs: D((1,x) + (1,y)) = 2 D(1, (x+y)/2)
    for i in range(gam.size):
        for j in range(i + 1, gam.size):
            mid = rate_and_free_energy(k, state, 0.5 * (gam[i] + gam[j])).D
            if 2.0 * mid > D[i] + D[j] + tol * scale:
                rep.violations.append(f"subadditivity fails at ({gam[i]}, {gam[j]})")
    return rep
