"""Inter-arrival kernels K(t), t = n + m >= 2, and free-end weights K_f.

A kernel is stored as ``scale * B(t)`` for a base family ``B`` with a known
generating function, plus a finite set of site overrides.  Every damped sum the
rest of the package needs reduces to the one-dimensional moments

    S_k(x) = sum_{t >= 2} t^k K(t) exp(-x t),

which are evaluated in closed form for small damping and by direct summation
otherwise.  Bivariate sums over (n, m) with K(n, m) = K(n + m) are collapsed
onto anti-diagonals in :func:`damped_sum`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import zeta

__all__ = [
    "Kernel",
    "FreeEndKernel",
    "TailBound",
    "KernelError",
    "GammaRatioBase",
    "PowerLawBase",
    "make_gamma_ratio_kernel",
    "make_modified_kernel",
    "make_k2",
    "make_k3",
    "make_power_law_kernel",
    "make_tabulated_kernel",
    "make_biophysics_kernel",
    "biophysics_scan_kernel",
    "kernel_moment",
    "damped_sum",
    "damped_deficit",
    "kernel_from_spec",
    "kernel_to_spec",
]

# Below this damping the closed-form generating functions are used; above it
# the series converges in a few hundred terms and is summed directly.
SERIES_CUTOFF = 0.5
# Relative gap |a - b| / mean below which the bivariate sums switch to the
# Taylor expansion around the diagonal.
DIAGONAL_SWITCH = 0.9


class KernelError(ValueError):
    """Invalid kernel parameters."""


# --------------------------------------------------------------------------
# base families
# --------------------------------------------------------------------------


def _series_horizon(x: float, k: int) -> int:
    return int(math.ceil((45.0 + 2.0 * k) / x + 2.0 * k / x)) + 10


class GammaRatioBase:
    """B(t) = Gamma(t - alpha) / (Gamma(-alpha) t!), the Taylor coefficients of (1 - z)^alpha."""

    kind = "gamma_ratio"

    def __init__(self, alpha: float, cache: int = 4096):
        if not (1.0 < alpha < 3.0) or abs(alpha - 2.0) < 1e-12:
            raise KernelError(f"gamma-ratio base needs alpha in (1,2) or (2,3), got {alpha}")
        self.alpha = float(alpha)
        self._values = self._recurrence(cache)
        self._theta_terms: dict[int, list[tuple[float, int, int]]] = {}

    def _recurrence(self, tmax: int) -> np.ndarray:
        a = self.alpha
        out = np.zeros(tmax + 1)
        k2 = gamma_fn(2.0 - a) / (gamma_fn(-a) * 2.0)
        n = np.arange(2, tmax, dtype=float)
        out[2] = k2
        out[3:] = k2 * np.cumprod((n - a) / (n + 1.0))
        return out

    def values(self, tmax: int) -> np.ndarray:
        if tmax >= self._values.size:
            self._values = self._recurrence(max(tmax + 1, 2 * self._values.size))
        return self._values[: tmax + 1]

    def at(self, t: int) -> float:
        return float(self.values(t)[t])

    @property
    def tail_constant(self) -> float:
        # B(t) t^{1+alpha} -> 1 / Gamma(-alpha)
        return 1.0 / gamma_fn(-self.alpha)

    def _terms(self, k: int) -> list[tuple[float, int, int]]:
        # theta = z d/dz; theta^k (1-z)^alpha = sum coef * z^j * u^(alpha - e)
        if k not in self._theta_terms:
            if k == 0:
                terms = [(1.0, 0, 0)]
            else:
                acc: dict[tuple[int, int], float] = {}
                for coef, j, e in self._terms(k - 1):
                    if j:
                        acc[(j, e)] = acc.get((j, e), 0.0) + coef * j
                    beta = self.alpha - e
                    acc[(j + 1, e + 1)] = acc.get((j + 1, e + 1), 0.0) - coef * beta
                terms = [(c, j, e) for (j, e), c in sorted(acc.items()) if c != 0.0]
            self._theta_terms[k] = terms
        return self._theta_terms[k]

    @property
    def extra_terms(self) -> dict[int, float]:
        """Coefficients of (1 - z)^alpha at t = 0, 1, which are not part of B."""
        return {0: 1.0, 1: -self.alpha}

    def moments(self, x: float, kmax: int) -> np.ndarray:
        """sum_{t >= 2} t^k B(t) exp(-x t)."""
        if x >= SERIES_CUTOFF:
            return self._series(x, kmax)
        out = self.full_moments(x, kmax)
        out[0] -= 1.0
        out += self.alpha * math.exp(-x)
        return out

    def full_moments(self, x: float, kmax: int) -> np.ndarray:
        """theta^k (1 - z)^alpha at z = exp(-x): the moments including t = 0, 1.

        For small x these are small (or singular) numbers evaluated without
        the O(1) cancellation that the t >= 2 moments carry.
        """
        a = self.alpha
        if x >= SERIES_CUTOFF:
            out = self._series(x, kmax)
            out[0] += 1.0
            out -= a * math.exp(-x)
            return out
        z = math.exp(-x)
        u = -math.expm1(-x)
        kidx, coef, jj, ee = self._term_table(kmax)
        p = a - ee
        if u == 0.0:
            # only the u^0 terms survive; negative powers diverge
            live = p == 0.0
            vals = np.where(live, coef * z**jj, 0.0)
            div = np.bincount(kidx[p < 0.0], minlength=kmax + 1) > 0
        else:
            vals = coef * z**jj * u**p
            div = np.zeros(kmax + 1, dtype=bool)
        out = np.bincount(kidx, weights=vals, minlength=kmax + 1)
        out[div] = math.inf if self.tail_constant > 0 else -math.inf
        return out

    def _series(self, x: float, kmax: int) -> np.ndarray:
        T = _series_horizon(x, kmax)
        t = np.arange(T + 1, dtype=float)
        w = self.values(T) * np.exp(-x * t)
        return np.array([np.sum(w[2:] * t[2:] ** k) for k in range(kmax + 1)])

    def _term_table(self, kmax: int):
        cached = getattr(self, "_table_cache", None)
        if cached is None or cached[0] < kmax:
            rows = [(k, c, j, e) for k in range(kmax + 1) for c, j, e in self._terms(k)]
            arr = np.array(rows, dtype=float)
            cached = (kmax, arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3])
            self._table_cache = cached
        k0, kidx, coef, jj, ee = cached
        sel = kidx <= kmax
        return kidx[sel], coef[sel], jj[sel], ee[sel]


class PowerLawBase:
    """B(t) = (t - shift)^(-s) for t >= max(2, shift + 1)."""

    kind = "power_law"

    def __init__(self, s: float, shift: int = 0, cache: int = 4096):
        if s <= 1.0:
            raise KernelError(f"power-law exponent must exceed 1, got {s}")
        if shift < 0:
            raise KernelError("shift must be nonnegative")
        self.s = float(s)
        self.shift = int(shift)
        self.t0 = max(2, self.shift + 1)
        self.alpha = self.s - 1.0
        self._values = self._table(cache)

    def _table(self, tmax: int) -> np.ndarray:
        out = np.zeros(tmax + 1)
        t = np.arange(self.t0, tmax + 1, dtype=float)
        out[self.t0 :] = (t - self.shift) ** (-self.s)
        return out

    def values(self, tmax: int) -> np.ndarray:
        if tmax >= self._values.size:
            self._values = self._table(max(tmax + 1, 2 * self._values.size))
        return self._values[: tmax + 1]

    def at(self, t: int) -> float:
        return float(self.values(t)[t])

    @property
    def tail_constant(self) -> float:
        return 1.0

    @property
    def extra_terms(self) -> dict[int, float]:
        """Coefficients c_0, c_1 at t = 0, 1 that cancel the constant and linear
        terms of the regular part of the generating function (empty for integer s)."""
        if abs(self.s - round(self.s)) < 1e-9:
            return {}
        c0, c1, _ = _power_regular(self.s, self.shift, self.t0, 0)
        return {0: float(c0), 1: float(c1)}

    def full_moments(self, x: float, kmax: int) -> np.ndarray:
        """Moments including the t = 0, 1 terms of :attr:`extra_terms`.

        Near x = 0 these are the singular part plus a regular part that starts
        at order x^2, so differences of nearby values keep relative precision.
        """
        extras = self.extra_terms
        if not extras:
            return self.moments(x, kmax)
        c0, c1 = extras[0], extras[1]
        if x >= SERIES_CUTOFF:
            out = self.moments(x, kmax)
            out[0] += c0
            return out + c1 * math.exp(-x)
        s, sh = self.s, self.shift
        _, _, g = _power_regular(s, sh, self.t0, kmax + _REGULAR_TERMS)
        J = g.size - 1
        out = np.empty(kmax + 1)
        for k in range(kmax + 1):
            sing = 0.0
            for i in range(k + 1):
                e = s - 1.0 - i
                if x == 0.0:
                    if e < 0:
                        sing = math.inf
                        break
                    continue
                sing += math.comb(k, i) * float(sh) ** (k - i) * gamma_fn(1.0 - s + i) * x**e
            sing *= math.exp(-x * sh) if math.isfinite(sing) else 1.0
            m = np.arange(J - k + 1)
            terms = g[k:] * np.cumprod(np.concatenate([[1.0], np.full(J - k, -x)]) / np.maximum(m, 1))
            out[k] = sing + float(np.sum(terms[::-1]))
        return out

    def moments(self, x: float, kmax: int) -> np.ndarray:
        """sum_{t >= t0} t^k B(t) exp(-x t)."""
        out = np.empty(kmax + 1)
        if x >= SERIES_CUTOFF:
            T = _series_horizon(x, kmax)
            t = np.arange(T + 1, dtype=float)
            w = self.values(T) * np.exp(-x * t)
            for k in range(kmax + 1):
                out[k] = np.sum(w[2:] * t[2:] ** k)
            return out
        # t = l + shift, l >= l0; t^k = sum_j C(k,j) shift^(k-j) l^j
        sh = self.shift
        l0 = self.t0 - sh
        damp = math.exp(-x * sh)
        for k in range(kmax + 1):
            total = 0.0
            for j in range(k + 1):
                coef = math.comb(k, j) * float(sh) ** (k - j)
                if coef == 0.0:
                    continue
                total += coef * _shifted_polylog(self.s - j, x, l0)
            out[k] = damp * total
        return out


_REGULAR_TERMS = 64


@lru_cache(maxsize=256)
def _power_regular(s: float, shift: int, t0: int, kmax: int) -> tuple[float, float, np.ndarray]:
    """Regular part of sum_{t >= t0} (t - shift)^(-s) e^{-xt} + c_0 + c_1 e^{-x}.

    Returns (c_0, c_1, g) with g_j = (-d/dx)^j of the regular part at x = 0,
    so that part equals sum_j g_j (-x)^j / j!; c_0, c_1 make g_0 = g_1 = 0.
    """
    J = max(kmax, 1) + _REGULAR_TERMS
    z = zeta(s - np.arange(J + 1, dtype=float))
    z = np.where(np.isfinite(z), z, 0.0)  # zeta(1) never enters for non-integer s
    R = np.empty(J + 1)
    for j in range(J + 1):
        # e^{-x shift} Li_s regular part, minus the excluded l = 1 .. t0 - shift - 1
        acc = math.fsum(math.comb(j, i) * float(shift) ** (j - i) * z[i] for i in range(j + 1))
        acc -= math.fsum(l ** (-s) * float(l + shift) ** j for l in range(1, t0 - shift))
        R[j] = acc
    c1 = -R[1]
    c0 = -R[0] - c1
    g = R + c1
    g[0] += c0
    g[:2] = 0.0
    return c0, c1, g


@lru_cache(maxsize=256)
def _polylog_coeffs(sigma: float, nterms: int = 48) -> tuple[float, np.ndarray]:
    j = np.arange(nterms)
    fact = np.array([math.factorial(int(i)) for i in j], dtype=float)
    coeffs = zeta(sigma - j.astype(float)) / fact
    return float(gamma_fn(1.0 - sigma)), coeffs


def _polylog_exp(sigma: float, x: float) -> float:
    """Li_sigma(exp(-x)) for 0 <= x < SERIES_CUTOFF."""
    if x == 0.0:
        return float(zeta(sigma)) if sigma > 1.0 else math.inf
    if abs(sigma - round(sigma)) < 1e-9:
        import mpmath

        return float(mpmath.polylog(int(round(sigma)), mpmath.e ** (-x)))
    g1, coeffs = _polylog_coeffs(sigma)
    mu = -x
    powers = mu ** np.arange(coeffs.size)
    return g1 * x ** (sigma - 1.0) + float(np.dot(coeffs, powers))


def _shifted_polylog(sigma: float, x: float, l0: int) -> float:
    """sum_{l >= l0} l^(-sigma) exp(-x l)."""
    total = _polylog_exp(sigma, x)
    if math.isinf(total):
        return total
    for l in range(1, l0):
        total -= l ** (-sigma) * math.exp(-x * l)
    return total


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TailBound:
    """Integral bound on sum_{t > horizon} t^power |K(t)|."""

    horizon: int
    power: int
    epsilon_tail: float


@dataclass(eq=False)
class Kernel:
    """K(t) = scale * base(t) off the override sites, K(t) = overrides[t] on them."""

    base: GammaRatioBase | PowerLawBase
    scale: float
    overrides: dict[int, float]
    family: str
    params: dict
    horizon: int = 1 << 20
    epsilon_tail: float = 1e-12
    _log_cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.overrides = {int(t): float(v) for t, v in sorted(self.overrides.items())}
        if any(t < 2 for t in self.overrides):
            raise KernelError("overrides must sit on t >= 2")
        vals = self.values(max(self.overrides, default=2) + 4)
        if np.any(vals[2:] <= 0.0) or self.scale * self.base.tail_constant <= 0.0:
            raise KernelError("kernel is not strictly positive")

    @property
    def alpha(self) -> float:
        return self.base.alpha

    @property
    def tail_constant(self) -> float:
        """L in K(t) ~ L t^{-(1+alpha)}."""
        return self.scale * self.base.tail_constant

    def at(self, t: int) -> float:
        if t < 2:
            return 0.0
        if t in self.overrides:
            return self.overrides[t]
        return self.scale * self.base.at(t)

    def values(self, tmax: int) -> np.ndarray:
        """Array of K(0..tmax); entries 0 and 1 are zero."""
        out = self.scale * self.base.values(tmax).copy()
        for t, v in self.overrides.items():
            if t <= tmax:
                out[t] = v
        out[:2] = 0.0
        return out

    def log_values(self, tmax: int) -> np.ndarray:
        """log K(0..tmax) with -inf at t = 0, 1."""
        cache = self._log_cache
        if cache is None or cache.size <= tmax:
            v = self.values(max(tmax, 64))
            with np.errstate(divide="ignore"):
                cache = np.log(v)
            cache[:2] = -np.inf
            self._log_cache = cache
        return cache[: tmax + 1]

    def moments(self, x: float, kmax: int) -> np.ndarray:
        """S_k(x) = sum_t t^k K(t) exp(-x t), k = 0..kmax (inf when divergent)."""
        if x < 0:
            raise KernelError("damping must be nonnegative")
        out = self.scale * self.base.moments(x, kmax)
        for t, v in self.overrides.items():
            d = (v - self.scale * self.base.at(t)) * math.exp(-x * t)
            out += d * float(t) ** np.arange(kmax + 1)
        return out

    def tilt_sum(self, g: float) -> float:
        """sum_t (t-1) K(t) exp(-t g)."""
        s = self.moments(g, 1)
        return float(s[1] - s[0])

    def tilt_deficit(self, g: float) -> float:
        """1 - sum_t (t-1) K(t) exp(-t g), without cancellation for small g."""
        u = self.base.full_moments(g, 1)
        c0 = self.scale * self.base.extra_terms.get(0, 0.0)
        ov = sum((t - 1) * (v - self.scale * self.base.at(t)) * math.exp(-t * g)
                 for t, v in self.overrides.items())
        return float(((1.0 - c0) - ov) - self.scale * (u[1] - u[0]))

    def normalization_defect(self) -> float:
        s = self.moments(0.0, 1)
        return float(s[1] - s[0] - 1.0)

    def second_moment_finite(self) -> bool:
        """Whether sum_t t^2 K(t) < infinity, i.e. alpha > 2."""
        return self.alpha > 2.0

    def tail_bound(self, horizon: int, power: int = 1) -> TailBound:
        """Bound sum_{t>T} t^power K(t) <= |L| (1+delta) T^{power-alpha} / (alpha-power)."""
        if power >= self.alpha:
            return TailBound(horizon, power, math.inf)
        # K(t) t^{1+alpha} / L is within a factor (1 + 2(1+alpha)^2/T) of 1 past T for
        # the built-in families, which the integral bound absorbs.
        fudge = 1.0 + 2.0 * (1.0 + self.alpha) ** 2 / horizon
        eps = abs(self.tail_constant) * fudge * horizon ** (power - self.alpha) / (self.alpha - power)
        return TailBound(horizon, power, eps)

    def horizon_for(self, eps: float, power: int = 1) -> int:
        """Smallest power-of-two horizon whose tail bound is below eps."""
        T = 64
        while self.tail_bound(T, power).epsilon_tail > eps and T < 1 << 40:
            T *= 2
        return T

    def hash(self) -> str:
        blob = json.dumps(kernel_to_spec(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FreeEndKernel:
    """K_f(0) = 1 and K_f(n) = L / (n + shift)^alpha_bar for n >= 1."""

    alpha_bar: float
    constant: float = 1.0
    shift: int = 0

    def __post_init__(self):
        if self.constant <= 0:
            raise KernelError("free-end constant must be positive")

    def values(self, nmax: int) -> np.ndarray:
        n = np.arange(nmax + 1, dtype=float)
        out = np.empty(nmax + 1)
        out[0] = 1.0
        out[1:] = self.constant * (n[1:] + self.shift) ** (-self.alpha_bar)
        return out

    def log_values(self, nmax: int) -> np.ndarray:
        return np.log(self.values(nmax))

    def total(self) -> float:
        """sum_{n>=0} K_f(n), finite for alpha_bar > 1."""
        if self.alpha_bar <= 1.0:
            return math.inf
        from scipy.special import zeta as hurwitz

        return 1.0 + self.constant * float(hurwitz(self.alpha_bar, 1.0 + self.shift))

    def regime(self, alpha: float) -> str:
        """EndsFree, EndsPinned or Boundary according to alpha_bar vs (1+alpha)/2."""
        ref = 0.5 * (1.0 + alpha)
        if abs(self.alpha_bar - ref) < 1e-12:
            return "Boundary"
        return "EndsFree" if self.alpha_bar < ref else "EndsPinned"


# --------------------------------------------------------------------------
# constructors
# --------------------------------------------------------------------------


def make_gamma_ratio_kernel(alpha: float) -> Kernel:
    """K(n) = Gamma(n - alpha) / (Gamma(-alpha) n!), alpha in (1, 2)."""
    if not (1.0 < alpha < 2.0):
        raise KernelError(f"gamma-ratio kernel needs alpha in (1,2), got {alpha}")
    return Kernel(GammaRatioBase(alpha), 1.0, {}, "GammaRatio", {"alpha": alpha})


def _renormalized(
    base: GammaRatioBase | PowerLawBase, scale: float, old: dict[int, float], new: dict[int, float]
) -> tuple[float, dict[int, float]]:
    def k_old(t):
        return old[t] if t in old else scale * base.at(t)

    fixed = sum((t - 1) * v for t, v in new.items())
    moved = sum((t - 1) * k_old(t) for t in new)
    if abs(1.0 - moved) < 1e-300:
        raise KernelError("overrides leave no mass to renormalize")
    c = (1.0 - fixed) / (1.0 - moved)
    if c * base.tail_constant * scale <= 0:
        raise KernelError(f"renormalization constant gives a nonpositive kernel ({c})")
    ov = {t: c * v for t, v in old.items() if t not in new}
    ov.update(new)
    return c, ov


def make_modified_kernel(base: Kernel, overrides: Iterable[tuple[int, float]]) -> Kernel:
    """Replace K on finitely many sites and rescale the rest so that sum (t-1)K(t) = 1."""
    new = {int(t): float(v) for t, v in overrides}
    if any(v <= 0 for v in new.values()):
        raise KernelError("override values must be positive")
    c, ov = _renormalized(base.base, base.scale, base.overrides, new)
    params = dict(base.params)
    params["overrides"] = sorted(new.items())
    k = Kernel(base.base, base.scale * c, ov, "ModifiedGammaRatio" if base.base.kind == "gamma_ratio" else base.family, params)
    k.params["c"] = c
    return k


def _signed_gamma_ratio(alpha: float) -> Kernel:
    # K_1 outside (1,2) is not positive; it is only ever used as a base to modify.
    b = GammaRatioBase(alpha)
    k = object.__new__(Kernel)
    k.base, k.scale, k.overrides, k.family = b, 1.0, {}, "GammaRatio"
    k.params = {"alpha": alpha}
    k.horizon, k.epsilon_tail, k._log_cache = 1 << 20, 1e-12, None
    return k


def make_k2(alpha: float, kappa: float) -> Kernel:
    """K_2: K(2) = K_1(2), K(3) = kappa, c_kappa K_1(n) for n >= 4."""
    base = _signed_gamma_ratio(alpha)
    k = make_modified_kernel(base, [(2, base.at(2)), (3, kappa)])
    k.family = "ModifiedGammaRatio"
    k.params = {"alpha": alpha, "overrides": [(3, kappa)], "variant": "K2", "c": k.params["c"]}
    return k


def make_k3(alpha: float, rho: float) -> Kernel:
    """K_3: K(2) = rho, c_rho K_1(n) for n >= 3."""
    base = _signed_gamma_ratio(alpha)
    k = make_modified_kernel(base, [(2, rho)])
    k.family = "ModifiedGammaRatio"
    k.params = {"alpha": alpha, "overrides": [(2, rho)], "variant": "K3", "c": k.params["c"]}
    return k


def make_power_law_kernel(alpha: float, overrides: Sequence[tuple[int, float]] = ()) -> Kernel:
    """K(t) = C / t^{1+alpha}, C fixed by normalization; optional site overrides."""
    if alpha <= 1.0:
        raise KernelError("power-law kernel needs alpha > 1 for a finite mean")
    b = PowerLawBase(1.0 + alpha)
    s = b.moments(0.0, 1)
    C = 1.0 / (s[1] - s[0])
    k = Kernel(b, C, {}, "PowerLaw", {"alpha": alpha, "C": C})
    if overrides:
        k = make_modified_kernel(k, overrides)
        k.family = "PowerLaw"
        k.params = {"alpha": alpha, "overrides": sorted((int(t), float(v)) for t, v in overrides)}
    return k


def make_tabulated_kernel(values: Sequence[float], alpha: float, tail_constant: float) -> Kernel:
    """K(t) = values[t-2] for t <= len(values)+1, tail_constant / t^{1+alpha} beyond.

    The table is taken as given; call :meth:`Kernel.normalization_defect` to
    see how far it is from a probability.
    """
    if alpha <= 1.0:
        raise KernelError("tabulated kernel needs alpha > 1")
    b = PowerLawBase(1.0 + alpha)
    ov = {t + 2: float(v) for t, v in enumerate(values)}
    k = Kernel(b, float(tail_constant), ov, "Tabulated",
               {"values": [float(v) for v in values], "alpha": alpha, "tail_constant": float(tail_constant)})
    return k


def _biophysics_cK(c: float) -> float:
    # c_K = sum_{n>=2} (n-1) n^{-c}
    return float(zeta(c - 1.0) - zeta(c))


def biophysics_scan_kernel(c: float, E_b: float, E_l: float, h: float) -> tuple[Kernel, float]:
    """Kernel and effective pinning for the temperature-like scan convention.

    The weight of an inter-arrival of total length t is
    w(t) = t^{-c} exp(h (E_b - E_l 1_{t>2})) / c_K with
    c_K = sum_{n>=2} (n-1) n^{-c}, so that w sums to one at h = 0.  It is
    written as exp(h_eff) K(t) with K normalized.
    """
    if c <= 2.0:
        raise KernelError("biophysics loop exponent must exceed 2")
    cK = _biophysics_cK(c)
    b = PowerLawBase(c)
    w2 = 2.0 ** (-c) * math.exp(h * E_b) / cK
    wl = math.exp(h * (E_b - E_l)) / cK  # multiplies t^{-c} for t >= 3
    mass = w2 + wl * (cK - 2.0 ** (-c))
    k = Kernel(b, wl / mass, {2: w2 / mass}, "Biophysics",
               {"c": c, "E_b": E_b, "E_l": E_l, "beta": h, "convention": "scan"})
    return k, math.log(mass)


def make_biophysics_kernel(c: float, E_b: float, E_l: float, beta: float,
                           convention: str = "strict") -> tuple[Kernel, float]:
    """Kernel and h_offset for the biophysics parameterization.

    ``strict``: exp(h)K(2) = exp(beta E_b) and
    exp(h)K(t) = exp(beta (E_b - E_l)) (t-2)^{-c} for t >= 3; K is normalized
    and h_offset is the value of h that reproduces these weights.

    ``scan``: see :func:`biophysics_scan_kernel`, with beta playing the role of h.
    """
    if c <= 2.0:
        raise KernelError("biophysics loop exponent must exceed 2")
    if convention == "scan":
        return biophysics_scan_kernel(c, E_b, E_l, beta)
    if convention != "strict":
        raise KernelError(f"unknown convention {convention!r}")
    if E_l == 0.0:
        # no loop penalty: the pure loop weight B(t-2) with a bare base pair
        pass
    b = PowerLawBase(c, shift=2)
    w2 = math.exp(beta * E_b)
    wl = math.exp(beta * (E_b - E_l))
    # sum_{t>=3} (t-1)(t-2)^{-c} = zeta(c-1) + zeta(c)
    mass = w2 + wl * float(zeta(c - 1.0) + zeta(c))
    k = Kernel(b, wl / mass, {2: w2 / mass}, "Biophysics",
               {"c": c, "E_b": E_b, "E_l": E_l, "beta": beta, "convention": "strict"})
    return k, math.log(mass)


# --------------------------------------------------------------------------
# bivariate damped sums
# --------------------------------------------------------------------------


def _eulerian_A(r: int, d: float) -> float:
    """sum_{n>=1} n^r y^n with y = exp(-d), d > 0."""
    y = math.exp(-d)
    om = -math.expm1(-d)
    if r == 0:
        return y / om
    if r == 1:
        return y / om**2
    if r == 2:
        return y * (1 + y) / om**3
    if r == 3:
        return y * (1 + 4 * y + y * y) / om**4
    if r == 4:
        return y * (1 + 11 * y + 11 * y * y + y**3) / om**5
    raise ValueError("moment order too high")


def _A_from0(q: int, d: float) -> float:
    """sum_{k>=0} k^q y^k."""
    if q == 0:
        return 1.0 / (-math.expm1(-d))
    return _eulerian_A(q, d)


@lru_cache(maxsize=None)
def _faulhaber(p: int) -> tuple[Fraction, ...]:
    """Coefficients (in t) of sum_{n=1}^{t-1} n^p."""
    B = _bernoulli(p + 1)
    coef = [Fraction(0)] * (p + 2)
    for j in range(p + 1):
        coef[p + 1 - j] += Fraction(math.comb(p + 1, j)) * B[j] / (p + 1)
    if p == 0:
        coef[0] -= 1
    return tuple(coef)


@lru_cache(maxsize=None)
def _bernoulli(n: int) -> tuple[Fraction, ...]:
    # B_1 = -1/2 convention
    B = [Fraction(1)]
    for m in range(1, n + 1):
        B.append(-sum(Fraction(math.comb(m + 1, k)) * B[k] for k in range(m)) / (m + 1))
    return tuple(B)


@lru_cache(maxsize=None)
def _diag_poly(i: int, j: int, k: int) -> tuple[float, ...]:
    """Coefficients in t of sum_{n=1}^{t-1} n^i (t-n)^j (2n-t)^k."""
    # bivariate polynomial in (t, n): dict {(pt, pn): coef}
    poly = {(0, i): Fraction(1)}

    def mul(p, q):
        out = {}
        for (a1, b1), c1 in p.items():
            for (a2, b2), c2 in q.items():
                key = (a1 + a2, b1 + b2)
                out[key] = out.get(key, 0) + c1 * c2
        return out

    for _ in range(j):
        poly = mul(poly, {(1, 0): Fraction(1), (0, 1): Fraction(-1)})
    for _ in range(k):
        poly = mul(poly, {(0, 1): Fraction(2), (1, 0): Fraction(-1)})
    deg = i + j + k + 1
    res = [Fraction(0)] * (deg + 1)
    for (pt, pn), c in poly.items():
        for e, f in enumerate(_faulhaber(pn)):
            res[pt + e] += c * f
    return tuple(float(r) for r in res)


def damped_sum(k: Kernel, i: int, j: int, a: float, b: float) -> float:
    """sum_{n,m>=1} n^i m^j K(n+m) exp(-a n - b m), for a, b >= 0.

    Returns +inf when the sum diverges.
    """
    const, var = _damped_parts(k, i, j, a, b)
    return const + var


def damped_deficit(k: Kernel, a: float, b: float) -> float:
    """1 - sum_{n,m>=1} K(n+m) exp(-a n - b m), accurate in absolute terms near a = b = 0."""
    const, var = _damped_parts(k, 0, 0, a, b)
    return (1.0 - const) - var


def _damped_parts(k: Kernel, i: int, j: int, a: float, b: float) -> tuple[float, float]:
    # (const, var) with the sum equal to const + var; const is exact, so a
    # caller can form 1 - Q without cancelling two numbers close to one.
    if a < 0 or b < 0:
        raise KernelError("damping must be nonnegative")
    const, base = _base_bivariate(k.base, i, j, a, b)
    if not math.isfinite(base):
        return 0.0, math.inf
    var = k.scale * base
    for t, v in k.overrides.items():
        var += (v - k.scale * k.base.at(t)) * _inner(t, i, j, a, b)
    return k.scale * const, var


def _inner(t: int, i: int, j: int, a: float, b: float) -> float:
    n = np.arange(1, t, dtype=float)
    return float(np.sum(n**i * (t - n) ** j * np.exp(-a * n - b * (t - n))))


def _base_moments(base, x: float, kmax: int) -> tuple[np.ndarray, bool]:
    # Below the cutoff the full generating-function moments (including the
    # t = 0, 1 coefficients of the base) avoid O(1) cancellations; above it the
    # plain t >= 2 moments avoid adding constants to tiny numbers.
    if x < SERIES_CUTOFF and base.extra_terms:
        return base.full_moments(x, kmax), True
    return base.moments(x, kmax), False


def _extra_moments(base, x: float, kmax: int) -> np.ndarray:
    """sum over the t = 0, 1 coefficients of t^k c_t exp(-x t)."""
    out = np.zeros(kmax + 1)
    for t, c in base.extra_terms.items():
        out += c * math.exp(-x * t) * float(t) ** np.arange(kmax + 1)
    return out


def _base_bivariate(base, i: int, j: int, a: float, b: float) -> tuple[float, float]:
    mean = 0.5 * (a + b)
    d = abs(a - b)
    if d <= DIAGONAL_SWITCH * mean or d == 0.0:
        try:
            return _damped_diag(base, i, j, mean, 0.5 * (a - b))
        except OverflowError:
            if d == 0.0:
                raise
    if a < b:
        i, j, a, b = j, i, b, a
    return _damped_direct(base, i, j, a, b, a - b)


def _damped_direct(base, i: int, j: int, a: float, b: float, d: float) -> tuple[float, float]:
    # n is the strongly damped coordinate: expand m^j = (t - n)^j and use the
    # closed forms of sum_{n=1}^{t-1} n^r y^n, valid termwise for t >= 1.
    kmax = i + j
    Sb, fb = _base_moments(base, b, kmax)
    Sa, fa = _base_moments(base, a, kmax)
    Eb = _extra_moments(base, b, kmax) if fb != fa else None
    Ea = _extra_moments(base, a, kmax) if fb != fa else None
    total = 0.0
    corr = 0.0
    for p in range(j + 1):
        c = math.comb(j, p) * (-1) ** p
        r = i + p
        q = j - p
        head = _eulerian_A(r, d) * Sb[q] if Sb[q] != 0.0 else 0.0
        if math.isinf(head):
            return 0.0, math.inf
        tail = 0.0
        for s in range(r + 1):
            tail += math.comb(r, s) * _A_from0(s, d) * Sa[q + r - s]
        total += c * (head - tail)
        if Eb is not None:
            # remove the t = 0, 1 terms carried by whichever side used full moments
            if fb:
                corr -= c * _eulerian_A(r, d) * Eb[q]
            else:
                corr += c * sum(math.comb(r, s) * _A_from0(s, d) * Ea[q + r - s] for s in range(r + 1))
    if fa and fb:
        # the t = 0 coefficient enters the closed forms as -c_0 for (i, j) = (0, 0)
        # and the t = 1 coefficient not at all
        const = base.extra_terms.get(0, 0.0) if i == 0 and j == 0 else 0.0
        return const, total
    return 0.0, total + corr


@lru_cache(maxsize=None)
def _diag_matrix(i: int, j: int, nmax: int) -> np.ndarray:
    """Row kk holds the coefficients of :func:`_diag_poly` (i, j, kk)."""
    P = np.zeros((nmax + 1, i + j + nmax + 2))
    for kk in range(nmax + 1):
        row = _diag_poly(i, j, kk)
        P[kk, : len(row)] = row
    return P


def _taylor_order(ratio: float) -> int:
    if ratio == 0.0:
        return 0
    # successive orders shrink roughly like (ratio / 2)^k times a mild polynomial
    n = int(math.ceil(17.0 / max(-math.log10(ratio / 2.0), 0.3))) + 6
    return min(n, 40)


def _damped_diag(base, i: int, j: int, mean: float, delta: float) -> tuple[float, float]:
    # exp(-a n - b m) = exp(-mean t) exp(-delta (2n - t)), expanded in delta
    nmax = _taylor_order(abs(2.0 * delta) / mean if mean > 0 else 0.0)
    if mean > 0:
        # keep the highest moment, roughly l! / mean^l, inside double range
        lcap = i + j + 1
        while lcap < i + j + nmax + 1 and math.lgamma(lcap + 2) - (lcap + 1) * math.log(mean) < 650:
            lcap += 1
        nmax = min(nmax, lcap - i - j - 1)
    P = _diag_matrix(i, j, nmax)
    with np.errstate(over="ignore"):
        S, full = _base_moments(base, mean, P.shape[1] - 1)
    used = np.any(P != 0.0, axis=0)
    if np.any(np.isinf(S[used])):
        if mean > 0:
            raise OverflowError("moment overflow")
        return 0.0, math.inf
    fac = np.ones(nmax + 1)
    for kk in range(1, nmax + 1):
        fac[kk] = fac[kk - 1] * (-delta) / kk
    with np.errstate(over="ignore", invalid="ignore"):
        terms = fac * (P @ np.where(used, S, 0.0))
    total = float(np.sum(terms))
    if not math.isfinite(total):
        raise OverflowError("diagonal expansion overflowed")
    # the polynomials vanish at t = 1 and equal -1 at t = 0 only for i = j = k = 0
    const = base.extra_terms.get(0, 0.0) if full and i == 0 and j == 0 else 0.0
    return const, total


def kernel_moment(k: Kernel, p: int, x: float, weight: str | None = None) -> float:
    """sum_{n,m} w(n,m)^p K(n+m) exp(-x n), with w = 1, n or m."""
    if x < 0:
        raise KernelError("damping must be nonnegative")
    if weight in (None, "None"):
        return damped_sum(k, 0, 0, x, 0.0)
    if weight == "FirstCoordinate":
        return damped_sum(k, p, 0, x, 0.0)
    if weight == "SecondCoordinate":
        return damped_sum(k, 0, p, x, 0.0)
    raise KernelError(f"unknown weight {weight!r}")


# --------------------------------------------------------------------------
# declarative spec
# --------------------------------------------------------------------------


def kernel_to_spec(k: Kernel) -> dict:
    fam = k.family
    p = k.params
    if fam == "GammaRatio":
        params = {"alpha": p["alpha"]}
        overrides = []
    elif fam == "ModifiedGammaRatio":
        params = {"alpha": p["alpha"], "variant": p.get("variant", "custom")}
        overrides = [list(o) for o in p["overrides"]]
    elif fam == "PowerLaw":
        params = {"alpha": p["alpha"]}
        overrides = [list(o) for o in p.get("overrides", [])]
    elif fam == "Biophysics":
        params = {key: p[key] for key in ("c", "E_b", "E_l", "beta", "convention")}
        overrides = []
    elif fam == "Tabulated":
        params = {"values": p["values"], "alpha": p["alpha"], "tail_constant": p["tail_constant"]}
        overrides = []
    else:
        raise KernelError(f"unknown family {fam}")
    return {"family": fam, "parameters": params, "overrides": overrides,
            "horizon": k.horizon, "epsilon_tail": k.epsilon_tail}


def kernel_from_spec(spec: dict) -> Kernel:
    """Build a kernel from ``{family, parameters, overrides, horizon, epsilon_tail}``."""
    try:
        fam = spec["family"]
        p = dict(spec.get("parameters", {}))
        ov = [(int(t), float(v)) for t, v in spec.get("overrides", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise KernelError(f"malformed kernel spec: {exc}") from exc
    try:
        if fam == "GammaRatio":
            k = make_gamma_ratio_kernel(float(p["alpha"]))
            if ov:
                raise KernelError("GammaRatio takes no overrides; use ModifiedGammaRatio")
        elif fam == "ModifiedGammaRatio":
            variant = p.get("variant", "custom")
            alpha = float(p["alpha"])
            if variant == "K2":
                (t, kappa), = ov
                if t != 3:
                    raise KernelError("K2 overrides site 3")
                k = make_k2(alpha, kappa)
            elif variant == "K3":
                (t, rho), = ov
                if t != 2:
                    raise KernelError("K3 overrides site 2")
                k = make_k3(alpha, rho)
            else:
                k = make_modified_kernel(_signed_gamma_ratio(alpha), ov)
                k.family = "ModifiedGammaRatio"
                k.params = {"alpha": alpha, "overrides": sorted(ov), "variant": "custom", "c": k.params["c"]}
        elif fam == "PowerLaw":
            k = make_power_law_kernel(float(p["alpha"]), ov)
        elif fam == "Biophysics":
            k, _ = make_biophysics_kernel(float(p["c"]), float(p["E_b"]), float(p["E_l"]),
                                          float(p.get("beta", 1.0)), p.get("convention", "strict"))
        elif fam == "Tabulated":
            k = make_tabulated_kernel(p["values"], float(p["alpha"]), float(p["tail_constant"]))
        else:
            raise KernelError(f"unknown kernel family {fam!r}")
    except KeyError as exc:
        raise KernelError(f"missing parameter {exc} for family {fam}") from exc
    k.horizon = int(spec.get("horizon", k.horizon))
    k.epsilon_tail = float(spec.get("epsilon_tail", k.epsilon_tail))
    return k
