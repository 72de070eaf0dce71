"""Finite-size checks of sharp asymptotics against exact partition functions.

Every check returns a :class:`CheckReport` with one :class:`CheckRow` per
claim.  A row holds the claimed limit, the value measured at the largest size,
the tolerance and a pass flag.  It also holds the per-size trend and an
extrapolated limit, so a miss caused by slow convergence can be told apart
from divergence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exact_dp import MEMORY_BUDGET, PartitionTable, build_constrained, build_free
from .kernels import FreeEndKernel, Kernel
from .ldp import Regime, rate_and_free_energy
from .tilt_solver import TiltState, solve_tilt

__all__ = [
    "CheckRow",
    "CheckReport",
    "SHARP_RTOL",
    "STABILITY_RTOL",
    "check_terminating_sharp",
    "check_convolution_bound",
    "check_free_sharp",
    "check_renewal_llt",
    "check_prelim_monotonicity",
    "merge_reports",
    "json_safe",
]

SHARP_RTOL = 0.05
STABILITY_RTOL = 0.10
LOG_RATE_TOL = 2e-3


def json_safe(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


@dataclass(frozen=True)
class CheckRow:
    check_id: str
    params: dict
    sizes: list
    measured: float
    claimed: float
    tolerance: float
    passed: bool
    trend: list = field(default_factory=list)  # measured value per size
    extrapolated: float = math.nan

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json_safe(d)


@dataclass(frozen=True)
class CheckReport:
    rows: tuple

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_json(self) -> str:
        return json.dumps([r.to_json() for r in self.rows], sort_keys=True, allow_nan=False)


def merge_reports(*reports: CheckReport) -> CheckReport:
    """Concatenate reports, ordered by check id (stable within an id)."""
    rows = [r for rep in reports for r in rep.rows]
    return CheckReport(tuple(sorted(rows, key=lambda r: r.check_id)))


def _sizes(sizes) -> np.ndarray:
    s = np.array(sorted(int(n) for n in sizes))
    if s.size < 2 or s[0] < 1:
        raise ValueError("need at least two positive sizes")
    return s


def _table(k: Kernel, h: float, N: int, M: int, table: PartitionTable | None) -> PartitionTable:
    if table is not None:
        if table.N < N or table.M < M or table.h != h:
            raise ValueError("supplied table does not cover the requested sizes")
        return table
    return build_constrained(k, N, M, h, MEMORY_BUDGET)


def _sub(table: PartitionTable, n: int, m: int) -> PartitionTable:
    return PartitionTable(n, m, table.h, table.log_Zc[: n + 1, : m + 1], table.kernel_hash)


def _fit_limit(sizes: np.ndarray, vals: np.ndarray, powers=(0.5, 1.0)) -> float:
    """Constant term of a least-squares fit vals ~ c0 + sum c_p N^-p."""
    n = sizes.astype(float)
    A = np.stack([np.ones_like(n)] + [n ** -p for p in powers[: max(0, n.size - 1)]], axis=1)
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return float(coef[0])


def _rel_row(check_id, params, sizes, vals, claimed, tol, powers=(0.5, 1.0)) -> CheckRow:
    measured = float(vals[-1])
    ok = abs(measured / claimed - 1.0) <= tol
    return CheckRow(check_id, params, [int(s) for s in sizes], measured, float(claimed), tol, bool(ok),
                    [float(v) for v in vals], _fit_limit(sizes, vals, powers))


def _stability_row(check_id, params, sizes, vals, tol) -> CheckRow:
    # the two largest sizes must agree to tol; the claimed value is the previous size
    measured, claimed = float(vals[-1]), float(vals[-2])
    ok = measured > 0 and claimed > 0 and abs(measured / claimed - 1.0) <= tol
    return CheckRow(check_id, params, [int(s) for s in sizes], measured, claimed, tol, bool(ok),
                    [float(v) for v in vals], _fit_limit(sizes, vals, (1.0,)))


def check_terminating_sharp(k: Kernel, h: float, sizes, gamma: float = 1.5,
                            table: PartitionTable | None = None) -> CheckReport:
    """Z^c_{N,M,h} / K(N+M) -> e^h / (1 - e^h)^2 for h < 0, M = round(gamma N).

    Also checks the uniform bound Z^c <= c_h K(N+M), c_h = sum_j j^c e^{jh},
    with c measured by :func:`check_convolution_bound`.
    """
    if h >= 0:
        raise ValueError("terminating estimate needs h < 0")
    sizes = _sizes(sizes)
    Ms = np.array([int(round(gamma * n)) for n in sizes])
    table = _table(k, h, int(sizes[-1]), int(Ms[-1]), table)
    lk = k.log_values(int(sizes[-1] + Ms[-1]))
    ratios = np.array([math.exp(table.log_z(n, m) - lk[n + m]) for n, m in zip(sizes, Ms)])
    claimed = math.exp(h) / math.expm1(h) ** 2
    params = {"kernel": k.hash(), "h": h, "gamma": gamma}
    rows = [_rel_row("terminating_sharp", params, sizes, ratios, claimed, SHARP_RTOL)]
    # monotone approach: distance to the limit shrinks with N
    dist = np.abs(ratios / claimed - 1.0)
    rows.append(CheckRow("terminating_monotone", params, [int(s) for s in sizes], float(dist[-1]), 0.0,
                         math.inf, bool(np.all(np.diff(dist) <= 0)), [float(d) for d in dist]))
    conv = check_convolution_bound(k, [8, 16, 32, 64])
    c = conv.rows[0].measured
    j = np.arange(1, 4000)
    c_h = math.fsum(np.exp(c * np.log(j) + h * j))
    grid = table.log_Zc[1:, 1:] - lk[np.add.outer(np.arange(1, table.N + 1), np.arange(1, table.M + 1))]
    worst = float(np.exp(np.max(grid)))
    rows.append(CheckRow("terminating_uniform_bound", {**params, "c": c}, [int(table.N), int(table.M)],
                         worst, c_h, math.inf, worst <= c_h))
    return CheckReport(tuple(rows) + conv.rows)


def _two_fold(K: np.ndarray, N: int, M: int) -> float:
    """K^{2*}(N, M) = sum over one intermediate point of K(i+j) K(N-i+M-j)."""
    t = np.arange(2, N + M - 1)
    lo = np.maximum(1, t - (M - 1))
    hi = np.minimum(N - 1, t - 1)
    cnt = np.maximum(hi - lo + 1, 0)
    return math.fsum(K[t] * K[N + M - t] * cnt)


def check_convolution_bound(k: Kernel, sizes) -> CheckReport:
    """Measured c in K^{2*}(N, M) <= 2^c K(N+M) over boxes [2, S]^2, stable over doubling S."""
    sizes = _sizes(sizes)
    K = k.values(2 * int(sizes[-1]))
    cs = []
    for S in sizes:
        r = max(_two_fold(K, n, m) / K[n + m] for n in range(2, S + 1) for m in range(2, S + 1))
        cs.append(math.log2(r))
    cs = np.array(cs)
    stable = bool(np.all(np.abs(np.diff(cs)) <= STABILITY_RTOL * np.abs(cs[1:])))
    row = CheckRow("convolution_constant", {"kernel": k.hash()}, [int(s) for s in sizes], float(cs.max()),
                   float(cs[-2]), STABILITY_RTOL, stable, [float(c) for c in cs])
    return CheckReport((row,))


def check_free_sharp(k: Kernel, kf: FreeEndKernel, h: float, gamma: float, sizes,
                     table: PartitionTable | None = None, state: TiltState | None = None) -> CheckReport:
    """Sharp estimates of Z^f along M = round(gamma N).

    h < 0, ends free:   Z^f (1 - e^h) / (K_f(N) K_f(M)) -> 1.
    h < 0, ends pinned: Z^f (1 - e^h)^2 / (e^h (sum K_f)^2 K(N+M)) -> 1.
    h > 0, Cramer:      sqrt(N) e^{-N F_{M/N}} Z^f stabilizes.
    """
    sizes = _sizes(sizes)
    Ms = np.array([int(round(gamma * n)) for n in sizes])
    params = {"kernel": k.hash(), "alpha_bar": kf.alpha_bar, "h": h, "gamma": gamma}
    if h == 0:
        raise ValueError("no sharp estimate at h = 0")
    if h < 0:
        regime = kf.regime(k.alpha)
        if regime == "Boundary":
            raise ValueError("free-end exponent at the boundary value (1 + alpha)/2 is not covered")
    else:
        state = state or solve_tilt(k, h)
        for n, m in zip(sizes, Ms):
            r = rate_and_free_energy(k, state, m / n)
            if r.regime is not Regime.CRAMER:
                raise ValueError(f"M/N = {m / n} is outside the Cramer region")
    table = _table(k, h, int(sizes[-1]), int(Ms[-1]), table)
    lzf = np.array([build_free(k, kf, _sub(table, n, m)) for n, m in zip(sizes, Ms)])
    if h < 0:
        lf = kf.log_values(int(Ms[-1]))
        lk = k.log_values(int(sizes[-1] + Ms[-1]))
        l1 = math.log(-math.expm1(h))
        if regime == "EndsFree":
            vals = np.exp(lzf + l1 - lf[sizes] - lf[Ms])
            cid = "free_sharp_ends_free"
        else:
            vals = np.exp(lzf + 2 * l1 - h - 2 * math.log(kf.total()) - lk[sizes + Ms])
            cid = "free_sharp_ends_pinned"
        return CheckReport((_rel_row(cid, params, sizes, vals, 1.0, SHARP_RTOL),))
    F = np.array([rate_and_free_energy(k, state, m / n).free_energy for n, m in zip(sizes, Ms)])
    vals = np.sqrt(sizes) * np.exp(lzf - sizes * F)
    return CheckReport((_stability_row("free_sharp_cramer_prefactor", params, sizes, vals, STABILITY_RTOL),))


def check_renewal_llt(k: Kernel, state: TiltState, gamma: float, sizes,
                      table: PartitionTable | None = None) -> CheckReport:
    """Local limit shape of P((N, M) in tau_h) = e^{-(N+M) g} Z^c_{N,M,h}.

    Cramer region: sqrt(N+M) e^{N D(1, M/N)} P stabilizes across sizes.
    Outside it only the exponential order is checked: the fitted slope of
    log P ~ -D N + b log N + c matches -D(1, gamma).
    """
    if not state.h > 0:
        raise ValueError("local limit check needs h > 0")
    sizes = _sizes(sizes)
    Ms = np.array([int(round(gamma * n)) for n in sizes])
    table = _table(k, state.h, int(sizes[-1]), int(Ms[-1]), table)
    lp = np.array([table.log_z(n, m) - (n + m) * state.g for n, m in zip(sizes, Ms)])
    params = {"kernel": k.hash(), "h": state.h, "gamma": gamma}
    r = rate_and_free_energy(k, state, gamma)
    if r.regime is Regime.CRAMER or gamma == 1.0:
        D = np.array([rate_and_free_energy(k, state, m / n).D for n, m in zip(sizes, Ms)])
        vals = np.sqrt(sizes + Ms) * np.exp(lp + sizes * D)
        return CheckReport((_stability_row("renewal_llt_prefactor", params, sizes, vals, STABILITY_RTOL),))
    if sizes.size < 3:
        raise ValueError("log-slope fit needs at least three sizes")
    n = sizes.astype(float)
    A = np.stack([n, np.log(n), np.ones_like(n)], axis=1)
    coef, *_ = np.linalg.lstsq(A, lp, rcond=None)
    slope = float(coef[0])
    row = CheckRow("renewal_log_rate", params, [int(s) for s in sizes], slope, -r.D, LOG_RATE_TOL,
                   bool(abs(slope + r.D) <= LOG_RATE_TOL), [float(v) for v in lp / n], slope)
    return CheckReport((row,))


def check_prelim_monotonicity(k: Kernel, state: TiltState, N: int, M: int, samples: int = 200,
                              seed: int = 0) -> CheckReport:
    """N F_{M/N} >= N' F_{M'/N'} for random (N', M') <= (N, M) with both ratios in the Cramer region."""
    rng = np.random.default_rng(seed)
    big = N * rate_and_free_energy(k, state, M / N).free_energy
    worst = math.inf
    tried = 0
    while tried < samples:
        n2 = int(rng.integers(1, N + 1))
        m2 = int(rng.integers(1, M + 1))
        r = rate_and_free_energy(k, state, m2 / n2)
        if r.regime is not Regime.CRAMER:
            continue
        worst = min(worst, big - n2 * r.free_energy)
        tried += 1
    row = CheckRow("prelim_monotonicity", {"kernel": k.hash(), "h": state.h, "N": N, "M": M},
                   [N], worst, 0.0, 0.0, worst >= 0.0)
    return CheckReport((row,))
