"""Exact finite-size partition functions in log domain.

The constrained partition function obeys

    Z_{n,m} = sum_{i<=n, j<=m} e^h K(i+j) Z_{n-i,m-j},  Z_{0,0} = 1.

Grouping the inner sum by t = i + j, the contribution of step length t to
Z_{n,m} is e^h K(t) times a window sum of Z over anti-diagonal n + m - t.
Once an anti-diagonal is complete, its window sums are built incrementally
(each longer window adds one cell, so only additions occur) and scattered to
every later cell.  This is O(NM min(N, M)) work and all in log domain.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .kernels import FreeEndKernel, Kernel, KernelError

__all__ = [
    "PartitionTable",
    "SizeError",
    "FiniteSizeEstimate",
    "build_constrained",
    "build_from_log_weights",
    "build_free",
    "free_summands",
    "enumerate_constrained",
    "biophysics_partition",
    "biophysics_log_weights",
    "finite_size_free_energy",
    "dump_table",
    "load_table",
]

MEMORY_BUDGET = 2 << 30  # bytes
_MAGIC = b"GPSZTBL1"
_NEG_INF = -np.inf


class SizeError(MemoryError):
    """Requested table exceeds the memory budget."""


@dataclass(frozen=True)
class PartitionTable:
    N: int
    M: int
    h: float
    log_Zc: np.ndarray  # shape (N+1, M+1), -inf where unreachable
    kernel_hash: str = ""

    def log_z(self, n: int, m: int) -> float:
        return float(self.log_Zc[n, m])


def _check_size(N: int, M: int, budget: int) -> None:
    need = 3 * 8 * (N + 1) * (M + 1)  # table, accumulator and one scratch copy
    if need > budget:
        raise SizeError(f"table ({N}+1)x({M}+1) needs {need} bytes, budget is {budget}")


def build_from_log_weights(logw: np.ndarray, N: int, M: int,
                           budget: int = MEMORY_BUDGET) -> np.ndarray:
    """log Z for step weights exp(logw[t]), t = 2..N+M; returns an (N+1, M+1) array.

    Cells are finalized one anti-diagonal at a time.  Each cell receives its
    contributions in increasing order of the source anti-diagonal (decreasing
    t), so results do not depend on anything but the inputs.  On square tables
    the lower triangle is copied from the upper one as each anti-diagonal
    completes, which makes the symmetry bit-exact.
    """
    if N < 0 or M < 0:
        raise ValueError("N, M must be nonnegative")
    _check_size(N, M, budget)
    lw = np.full(N + M + 1, _NEG_INF)
    src = np.asarray(logw, dtype=float)[: N + M + 1]
    lw[: src.size] = src
    lw[:2] = _NEG_INF
    Z = np.full((N + 1, M + 1), _NEG_INF)
    Z[0, 0] = 0.0
    acc = np.full((N + 1, M + 1), _NEG_INF)
    square = N == M
    for d in range(N + M):
        if d > 0:
            p = np.arange(max(1, d - M), min(d - 1, N) + 1)
            q = d - p
            keep = (q >= 1)
            p, q = p[keep], q[keep]
            Z[p, q] = acc[p, q]
            if square:
                up = p <= q
                Z[q[up], p[up]] = Z[p[up], q[up]]
        # scatter the windows of anti-diagonal d; cell p holds Z[p, d - p]
        plo, phi = max(0, d - M), min(d, N)
        cells = np.arange(plo, phi + 1)
        zc = Z[cells, d - cells]
        if np.all(np.isneginf(zc)):
            continue
        # windows may end past the last cell of the anti-diagonal (up to p = N - 1)
        ends = np.arange(plo, max(phi, N - 1) + 1)
        z = np.full(ends.size, _NEG_INF)
        z[: zc.size] = zc
        win = z.copy()
        for t in range(2, N + M - d + 1):
            if t > 2:
                # window of t - 1 cells ending at each e: the one ending at e - 1 plus z_e;
                # cells before the start of the anti-diagonal are zero
                win = np.concatenate((z[:1], np.logaddexp(win[:-1], z[1:])))
            tn = ends + 1
            tm = d + t - tn
            ok = (tn <= N) & (tm >= 1) & (tm <= M) & np.isfinite(win)
            if square:
                ok &= tn <= tm
            if not np.any(ok):
                continue
            a, b = tn[ok], tm[ok]
            acc[a, b] = np.logaddexp(acc[a, b], lw[t] + win[ok])
    d = N + M
    if d > 0 and N >= 1 and M >= 1:
        Z[N, M] = acc[N, M]
    return Z


def build_constrained(k: Kernel, N: int, M: int, h: float,
                      budget: int = MEMORY_BUDGET) -> PartitionTable:
    """Table of log Z^c_{n,m,h} for 0 <= n <= N, 0 <= m <= M."""
    if N < 1 or M < 1:
        raise ValueError("N, M must be >= 1")
    lw = h + k.log_values(N + M)
    return PartitionTable(N, M, h, build_from_log_weights(lw, N, M, budget), k.hash())


def free_summands(kf: FreeEndKernel, table: PartitionTable) -> np.ndarray:
    """log of K_f(i) K_f(j) Z^c_{N-i, M-j} for 0 <= i <= N, 0 <= j <= M."""
    lf = kf.log_values(max(table.N, table.M))
    Zr = table.log_Zc[::-1, ::-1]  # Zr[i, j] = Z^c_{N-i, M-j}
    return lf[: table.N + 1, None] + lf[None, : table.M + 1] + Zr


def build_free(k: Kernel, kf: FreeEndKernel, table: PartitionTable) -> float:
    """log Z^f_{N,M,h} = log sum_{i,j} K_f(i) K_f(j) Z^c_{N-i,M-j}."""
    s = free_summands(kf, table)
    mx = np.max(s)
    if not np.isfinite(mx):
        return -math.inf
    return float(mx + np.log(np.sum(np.exp(s - mx))))


def enumerate_constrained(k: Kernel, N: int, M: int, h: float) -> float:
    """log Z^c_{N,M,h} by enumerating every pair of compositions of N and M.

    Exponential cost; an independent oracle for small sizes.
    """
    w = np.exp(h) * k.values(N + M)
    terms = []
    for n in range(1, min(N, M) + 1):
        ca = [np.diff((0,) + c + (N,)) for c in itertools.combinations(range(1, N), n - 1)]
        cb = [np.diff((0,) + c + (M,)) for c in itertools.combinations(range(1, M), n - 1)]
        for a in ca:
            for b in cb:
                terms.append(math.prod(w[a + b]))
    total = math.fsum(terms)
    return math.log(total) if total > 0 else -math.inf


def biophysics_log_weights(c: float, E_b: float, E_l: float, beta: float, tmax: int) -> np.ndarray:
    """log of exp(beta E_b) at t = 2 and exp(beta (E_b - E_l)) (t - 2)^(-c) for t >= 3."""
    lw = np.full(tmax + 1, _NEG_INF)
    if tmax >= 2:
        lw[2] = beta * E_b
    t = np.arange(3, tmax + 1, dtype=float)
    lw[3:] = beta * (E_b - E_l) - c * np.log(t - 2.0)
    return lw


def _biophysics_W(c: float, E_b: float, E_l: float, beta: float, N: int, M: int) -> np.ndarray:
    """log W_l^r, 1 <= l <= N, 1 <= r <= M, by the loop recursion.

    W_{m+1}^{r+1} = e^{beta E_b} W_m^r
                    + e^{beta (E_b - E_l)} sum_{0 <= i < m, 0 <= i' < r, i + i' > 0} B(i+i') W_{m-i}^{r-i'},
    with B(l) = l^(-c), W_1^1 = 1 and W_1^r = W_l^1 = 0 otherwise.
    """
    W = np.full((N + 1, M + 1), _NEG_INF)
    W[1, 1] = 0.0
    lb = np.full(N + M + 1, _NEG_INF)
    lb[1:] = -c * np.log(np.arange(1, N + M + 1, dtype=float))
    eb, el = beta * E_b, beta * (E_b - E_l)
    for s in range(4, N + M + 1):  # l + r = s, row-by-anti-diagonal order
        for l in range(max(2, s - M), min(N, s - 2) + 1):
            r = s - l
            m, rr = l - 1, r - 1
            i = np.arange(m)[:, None]
            ip = np.arange(rr)[None, :]
            loop = lb[i + ip] + W[m - i, rr - ip]
            loop[0, 0] = _NEG_INF  # i + i' > 0
            mx = np.max(loop)
            tot = eb + W[m, rr]
            if np.isfinite(mx):
                tot = np.logaddexp(tot, el + mx + np.log(np.sum(np.exp(loop - mx))))
            W[l, r] = tot
    return W


def biophysics_partition(c: float, E_b: float, E_l: float, beta: float, N: int, M: int,
                         cbar: float, method: str = "recursion",
                         reward_first_pair: bool = False) -> float:
    """log Z_N^M = log sum_{i<N, j<M} A(i) A(j) W_{N-i}^{M-j}, A(l) = (l+1)^(-cbar).

    ``method="recursion"`` evaluates the loop recursion directly (quartic
    cost); ``"renewal"`` uses the identity W_l^r = Z_{l-1,r-1} for the step
    weights of :func:`biophysics_log_weights`.  With W_1^1 = 1 (the default)
    Z_{N+1}^{M+1} equals the renewal Z^f_{N,M}; ``reward_first_pair`` sets
    W_1^1 = exp(beta E_b) instead, so that exp(-beta E_b) Z_{N+1}^{M+1} does.
    """
    if N < 1 or M < 1:
        raise ValueError("N, M must be >= 1")
    if c <= 2.0:
        raise KernelError("biophysics loop exponent must exceed 2")
    _check_size(N, M, MEMORY_BUDGET)
    if method == "recursion":
        W = _biophysics_W(c, E_b, E_l, beta, N, M)
    elif method == "renewal":
        Z = build_from_log_weights(biophysics_log_weights(c, E_b, E_l, beta, N + M), N - 1, M - 1)
        W = np.full((N + 1, M + 1), _NEG_INF)
        W[1:, 1:] = Z
    else:
        raise ValueError(f"unknown method {method!r}")
    la = -cbar * np.log(np.arange(1, max(N, M) + 1, dtype=float))  # A(0..)
    s = la[:N, None] + la[None, :M] + W[N:0:-1, M:0:-1]
    mx = np.max(s)
    out = float(mx + np.log(np.sum(np.exp(s - mx))))
    # W is linear in W_1^1
    return out + beta * E_b if reward_first_pair else out


@dataclass(frozen=True)
class FiniteSizeEstimate:
    sizes: np.ndarray
    constrained: np.ndarray  # (1/N) log Z^c_{N, round(gamma N)}
    free: np.ndarray  # (1/N) log Z^f_{N, round(gamma N)}
    gap: np.ndarray  # free - constrained
    extrapolated: float  # fit of constrained = f + a/N + b log(N)/N
    extrapolated_free: float


def _extrapolate(sizes: np.ndarray, vals: np.ndarray) -> float:
    # Richardson-style fit in the basis 1, 1/N, log(N)/N on the largest sizes
    n = sizes.astype(float)
    A = np.stack([np.ones_like(n), 1.0 / n, np.log(n) / n], axis=1)
    if n.size < 3:
        A = A[:, :2]
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return float(coef[0])


def finite_size_free_energy(k: Kernel, kf: FreeEndKernel, h: float, gamma: float,
                            sizes, budget: int = MEMORY_BUDGET,
                            table: PartitionTable | None = None) -> FiniteSizeEstimate:
    """(1/N) log Z at M = round(gamma N) for each N, from one table of the largest size.

    A prebuilt ``table`` covering the largest size (same h) may be passed in.
    """
    sizes = np.array(sorted(int(s) for s in sizes))
    if sizes.size < 3:
        raise ValueError("need at least 3 sizes")
    Ms = np.array([int(round(gamma * n)) for n in sizes])
    if np.any(Ms < 1):
        raise ValueError("every size needs M >= 1")
    if table is None:
        table = build_constrained(k, int(sizes[-1]), int(Ms[-1]), h, budget)
    elif table.N < sizes[-1] or table.M < Ms[-1] or table.h != h:
        raise ValueError("supplied table does not cover the requested sizes")
    cons, free = [], []
    for n, m in zip(sizes, Ms):
        sub = PartitionTable(int(n), int(m), h, table.log_Zc[: n + 1, : m + 1], table.kernel_hash)
        cons.append(sub.log_z(n, m) / n)
        free.append(build_free(k, kf, sub) / n)
    cons, free = np.array(cons), np.array(free)
    return FiniteSizeEstimate(sizes, cons, free, free - cons,
                              _extrapolate(sizes, cons), _extrapolate(sizes, free))


def dump_table(table: PartitionTable, path) -> None:
    """Binary dump: magic, version string, N, M, h, kernel hash, then row-major float64."""
    ver = __version__.encode()
    kh = table.kernel_hash.encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", len(ver)) + ver)
        fh.write(struct.pack("<qqd", table.N, table.M, table.h))
        fh.write(struct.pack("<H", len(kh)) + kh)
        fh.write(np.ascontiguousarray(table.log_Zc, dtype="<f8").tobytes())


def load_table(path) -> PartitionTable:
    with open(Path(path), "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError("not a partition table dump")
        (nv,) = struct.unpack("<H", fh.read(2))
        fh.read(nv)
        N, M, h = struct.unpack("<qqd", fh.read(24))
        (nk,) = struct.unpack("<H", fh.read(2))
        kh = fh.read(nk).decode()
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != (N + 1) * (M + 1):
        raise ValueError("truncated partition table dump")
    return PartitionTable(N, M, h, data.reshape(N + 1, M + 1).copy(), kh)
