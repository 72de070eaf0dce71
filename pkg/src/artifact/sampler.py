"""Exact path sampling for the constrained and free pinning measures.

Backward sampling walks from the end point towards (0, 0).  From (n, m) the
previous renewal point is (n - i, m - j) with probability
e^h K(i+j) Z_{n-i,m-j} / Z_{n,m}.  The step length t = i + j is drawn first by
a sequential inverse-CDF search (short steps carry most of the mass, so the
search is short on average), then the split of t along its anti-diagonal
window.  All paths of a batch advance in lockstep, vectorized over paths.

Random streams: the seed feeds a SeedSequence that is spawned once per chunk
of ``CHUNK`` consecutive path indices, and each chunk draws from its own
Philox generator.  Chunks are independent, so the output is a function of
(seed, count) only and chunks can be processed in any order.  Within a chunk
the lockstep draws depend on which paths are still running, so changing the
count changes the paths of the last chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exact_dp import PartitionTable, free_summands
from .kernels import FreeEndKernel, Kernel
from .ldp import RateResult, Regime
from .tilt_solver import TiltState

__all__ = [
    "CHUNK",
    "RegimeError",
    "PathBatch",
    "RenewalPath",
    "FreeSample",
    "ForwardSample",
    "PathStats",
    "LimitLawReport",
    "sample_constrained",
    "sample_bridges",
    "sample_free",
    "tilted_forward_simulate",
    "path_stats",
    "tv_distance",
    "binned_pairs",
    "cramer_end_law",
    "cramer_step_law",
    "limit_law_report",
    "enumerate_paths",
]

CHUNK = 4096
TV_CUTOFF = 64


class RegimeError(ValueError):
    """The requested limit law does not apply to the given parameters."""


@dataclass(frozen=True)
class RenewalPath:
    points: np.ndarray  # (k, 2) int, strictly increasing in both coordinates

    @property
    def contacts(self) -> int:
        return int(self.points.shape[0])

    def steps(self) -> np.ndarray:
        return np.diff(np.vstack([[0, 0], self.points]), axis=0)


@dataclass(frozen=True)
class PathBatch:
    """Many paths in CSR form: points[offsets[i]:offsets[i+1]] belong to path i."""

    offsets: np.ndarray
    points: np.ndarray

    def __len__(self) -> int:
        return self.offsets.size - 1

    def __getitem__(self, i: int) -> RenewalPath:
        return RenewalPath(self.points[self.offsets[i]: self.offsets[i + 1]])

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def steps(self) -> np.ndarray:
        """All inter-arrivals of all paths, shape (total, 2)."""
        prev = np.vstack([[0, 0], self.points[:-1]]) if self.points.size else self.points
        prev = prev.copy()
        prev[self.offsets[:-1][self.counts() > 0]] = 0
        return self.points - prev

    def keys(self) -> list[tuple]:
        """Hashable per-path keys (tuple of flattened coordinates)."""
        return [tuple(self.points[a:b].ravel()) for a, b in zip(self.offsets[:-1], self.offsets[1:])]


@dataclass(frozen=True)
class FreeSample:
    last_contact: np.ndarray  # (count, 2): (F1, F2)
    free_ends: np.ndarray  # (count, 2): (L1, L2) = (N - F1, M - F2)
    paths: PathBatch | None  # bridges to the last contact, when requested


@dataclass(frozen=True)
class ForwardSample:
    paths: PathBatch  # renewal points inside the box
    renewals: np.ndarray  # total renewal count, including points beyond the box
    hits: np.ndarray  # whether the target point was visited


@dataclass(frozen=True)
class PathStats:
    contact_fraction: np.ndarray
    last_contact: np.ndarray
    free_ends: np.ndarray
    step_histogram: np.ndarray  # counts of (i, j), binned at the cutoff
    cutoff: int


@dataclass(frozen=True)
class LimitLawReport:
    kind: str
    n_samples: int
    tv: float
    max_abs_z: float
    step_tv: float = math.nan
    n_steps: int = 0
    extra: dict = field(default_factory=dict)


def _streams(seed: int, count: int):
    """Yield (start, stop, generator) per chunk of path indices."""
    children = np.random.SeedSequence(seed).spawn((count + CHUNK - 1) // CHUNK)
    for c, ss in enumerate(children):
        yield c * CHUNK, min(count, (c + 1) * CHUNK), np.random.Generator(np.random.Philox(ss))


def _log_weights(k: Kernel, table: PartitionTable) -> np.ndarray:
    return table.h + k.log_values(table.N + table.M)


def _window(Z: np.ndarray, n: np.ndarray, m: np.ndarray, t: int) -> np.ndarray:
    """log Z over the predecessors at step length t, shape (B, t-1), -inf padded."""
    d = n + m - t
    plo = np.maximum(n - t + 1, 0)
    phi = np.minimum(n - 1, d)
    p = plo[:, None] + np.arange(t - 1)[None, :]
    ok = p <= phi[:, None]
    p = np.where(ok, p, 0)
    q = np.where(ok, d[:, None] - p, 0)
    return np.where(ok, Z[p, q], -np.inf), p, q


def _backward(Z: np.ndarray, lw: np.ndarray, n: np.ndarray, m: np.ndarray, rng) -> list:
    """Backward walks from (n, m) to (0, 0); returns per-step (index, n, m) arrays."""
    idx = np.arange(n.size)
    n, m = n.copy(), m.copy()
    out = [(idx, n.copy(), m.copy())]
    live = (n > 0) | (m > 0)
    idx, n, m = idx[live], n[live], m[live]
    while idx.size:
        u = rng.random(idx.size)
        u2 = rng.random(idx.size)
        base = Z[n, m]
        chosen = np.zeros(idx.size, dtype=np.int64)
        last_pos = np.zeros(idx.size, dtype=np.int64)
        cum = np.zeros(idx.size)
        todo = np.arange(idx.size)
        t = 2
        while todo.size:
            nn, mm = n[todo], m[todo]
            tmax = nn + mm
            active = t <= tmax
            if not np.all(active):
                # rounding left the cumulative mass just short of u: take the last positive step
                gone = todo[~active]
                chosen[gone] = last_pos[gone]
                todo = todo[active]
                nn, mm = nn[active], mm[active]
                if not todo.size:
                    break
            w, _, _ = _window(Z, nn, mm, t)
            mx = np.max(w, axis=1)
            fin = np.isfinite(mx)
            logs = np.full(todo.size, -np.inf)
            with np.errstate(invalid="ignore"):
                logs[fin] = mx[fin] + np.log(np.sum(np.exp(w[fin] - mx[fin, None]), axis=1))
            pr = np.exp(lw[t] + logs - base[todo])
            cum[todo] += pr
            last_pos[todo[pr > 0]] = t
            hit = cum[todo] >= u[todo]
            chosen[todo[hit]] = t
            todo = todo[~hit]
            t += 1
        # split of the chosen step along its window
        p_new = np.empty(idx.size, dtype=np.int64)
        q_new = np.empty(idx.size, dtype=np.int64)
        for t in np.unique(chosen):
            sel = np.flatnonzero(chosen == t)
            w, p, q = _window(Z, n[sel], m[sel], int(t))
            mx = np.max(w, axis=1)
            c = np.cumsum(np.exp(w - mx[:, None]), axis=1)
            j = np.sum(c < u2[sel, None] * c[:, -1:], axis=1)
            j = np.minimum(j, c.shape[1] - 1)
            # never land on a zero-weight cell through rounding
            while True:
                bad = ~np.isfinite(w[np.arange(sel.size), j])
                if not np.any(bad):
                    break
                j[bad] -= 1
            p_new[sel] = p[np.arange(sel.size), j]
            q_new[sel] = q[np.arange(sel.size), j]
        n, m = p_new, q_new
        out.append((idx, n.copy(), m.copy()))
        live = (n > 0) | (m > 0)
        idx, n, m = idx[live], n[live], m[live]
    return out


def _collect(steps: list, count: int, offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-path points in forward order from backward step records."""
    ids = np.concatenate([s[0] for s in steps])
    order_key = np.concatenate([np.full(s[0].size, -r) for r, s in enumerate(steps)])
    pts = np.stack([np.concatenate([s[1] for s in steps]), np.concatenate([s[2] for s in steps])], axis=1)
    keep = (pts[:, 0] > 0) | (pts[:, 1] > 0)
    ids, order_key, pts = ids[keep], order_key[keep], pts[keep]
    o = np.lexsort((order_key, ids))
    return ids[o] + offset, pts[o], np.bincount(ids, minlength=count)


def _batch(ids_pts: list, count: int) -> PathBatch:
    pts = np.concatenate([p for _, p, _ in ids_pts]) if ids_pts else np.zeros((0, 2), dtype=np.int64)
    cnt = np.concatenate([c for _, _, c in ids_pts]) if ids_pts else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(cnt, out=offsets[1:])
    return PathBatch(offsets, pts.astype(np.int64))


def sample_bridges(k: Kernel, table: PartitionTable, ends: np.ndarray, rng_seed: int) -> PathBatch:
    """Backward-sample one constrained path to each end point in ``ends`` (shape (count, 2))."""
    ends = np.asarray(ends, dtype=np.int64).reshape(-1, 2)
    if np.any(ends[:, 0] > table.N) or np.any(ends[:, 1] > table.M):
        raise ValueError("end point outside the table")
    if np.any(np.isneginf(table.log_Zc[ends[:, 0], ends[:, 1]])):
        raise ValueError("end point has zero weight")
    lw = _log_weights(k, table)
    parts = []
    for a, b, rng in _streams(rng_seed, ends.shape[0]):
        steps = _backward(table.log_Zc, lw, ends[a:b, 0], ends[a:b, 1], rng)
        parts.append(_collect(steps, b - a))
    return _batch(parts, ends.shape[0])


def sample_constrained(k: Kernel, table: PartitionTable, rng_seed: int, count: int) -> PathBatch:
    """``count`` exact samples of the constrained measure on [0, N] x [0, M]."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    ends = np.tile([table.N, table.M], (count, 1))
    return sample_bridges(k, table, ends, rng_seed)


def sample_free(k: Kernel, kf: FreeEndKernel, table: PartitionTable, rng_seed: int, count: int,
                bridges: bool = True) -> FreeSample:
    """Exact samples of the free measure.

    The last contact (F1, F2) is drawn with weight K_f(N-F1) K_f(M-F2) Z_{F1,F2};
    with ``bridges`` the constrained path to it is sampled as well.  The two
    stages use independent streams derived from the seed.
    """
    s = free_summands(kf, table)[::-1, ::-1]  # s[F1, F2]
    flat = np.exp(s - np.max(s)).ravel()
    cdf = np.cumsum(flat)
    cdf /= cdf[-1]
    ss_last, ss_bridge = np.random.SeedSequence(rng_seed).spawn(2)
    last = np.empty((count, 2), dtype=np.int64)
    seed_last = int(ss_last.generate_state(1)[0])
    for a, b, rng in _streams(seed_last, count):
        cell = np.searchsorted(cdf, rng.random(b - a), side="right")
        cell = np.minimum(cell, flat.size - 1)
        last[a:b, 0], last[a:b, 1] = np.divmod(cell, table.M + 1)
    paths = None
    if bridges:
        paths = sample_bridges(k, table, last, int(ss_bridge.generate_state(1)[0]))
    free = np.stack([table.N - last[:, 0], table.M - last[:, 1]], axis=1)
    return FreeSample(last, free, paths)


def _step_law(k: Kernel, state: TiltState, tmax: int) -> tuple[np.ndarray, float]:
    """Normalized law of the total length t = n + m of a tilted step, t <= tmax, and kill probability.

    For h > 0 the law (t-1) e^{h - t g} K(t) is proper.  For h <= 0 a step
    survives with probability e^h and then has law (t-1) K(t).
    """
    t = np.arange(tmax + 1, dtype=float)
    lk = k.log_values(tmax)
    if state.h > 0:
        lp = np.log(np.maximum(t - 1, 1e-300)) + state.h + lk - state.g * t
        kill = 0.0
    else:
        lp = np.log(np.maximum(t - 1, 1e-300)) + lk
        kill = -math.expm1(state.h)
    p = np.where(t >= 2, np.exp(lp), 0.0)
    return p, kill


def tilted_forward_simulate(k: Kernel, state: TiltState, box: tuple[int, int], rng_seed: int,
                            count: int, target: tuple[int, int] | None = None) -> ForwardSample:
    """Forward simulation of the tilted renewal until it leaves ``box`` or is killed.

    Steps are drawn by inverse CDF on t, then split uniformly as (n, t - n).
    Steps longer than the box diagonal are drawn as a single overflow class.
    After leaving the box the walk keeps counting renewals (kill or not) but
    positions are no longer tracked, so ``renewals`` has its exact law.
    """
    N, M = box
    tmax = N + M
    p, kill = _step_law(k, state, tmax)
    p = p * (1.0 - kill)
    cdf = np.cumsum(p)  # remaining mass: overflow then kill
    overflow_end = (1.0 - kill)
    tgt = (N, M) if target is None else target
    parts, renewals, hits = [], np.zeros(count, dtype=np.int64), np.zeros(count, dtype=bool)
    for a, b, rng in _streams(rng_seed, count):
        B = b - a
        n = np.zeros(B, dtype=np.int64)
        m = np.zeros(B, dtype=np.int64)
        inside = np.ones(B, dtype=bool)
        alive = np.ones(B, dtype=bool)
        ren = np.zeros(B, dtype=np.int64)
        steps = []
        while np.any(alive):
            ai = np.flatnonzero(alive)
            u = rng.random(ai.size)
            u2 = rng.random(ai.size)
            killed = u >= overflow_end
            over = (u >= cdf[-1]) & ~killed
            step = ~killed & ~over
            t = np.searchsorted(cdf, u, side="right")
            alive[ai[killed]] = False
            ren[ai[~killed]] += 1
            # overflow leaves the box; positions stop being tracked
            inside[ai[over]] = False
            sj = ai[step & inside[ai]]
            ts = t[step & inside[ai]]
            i = 1 + np.floor(u2[step & inside[ai]] * (ts - 1)).astype(np.int64)
            i = np.minimum(i, ts - 1)
            n[sj] += i
            m[sj] += ts - i
            out = (n[sj] > N) | (m[sj] > M)
            inside[sj[out]] = False
            rec = sj[~out]
            steps.append((rec, n[rec].copy(), m[rec].copy()))
            hits[a + rec[(n[rec] == tgt[0]) & (m[rec] == tgt[1])]] = True
            # once outside, only the count matters: finish it with a geometric draw
            done_box = alive & ~inside
            if np.any(done_box):
                di = np.flatnonzero(done_box)
                if kill > 0:
                    ren[di] += rng.geometric(kill, di.size) - 1
                else:
                    ren[di] = -1  # infinite for a proper law
                alive[di] = False
        renewals[a:b] = ren
        if steps:
            ids = np.concatenate([s[0] for s in steps])
            pts = np.stack([np.concatenate([s[1] for s in steps]), np.concatenate([s[2] for s in steps])], 1)
            o = np.argsort(ids, kind="stable")
            parts.append((ids[o], pts[o], np.bincount(ids, minlength=B)))
    return ForwardSample(_batch(parts, count), renewals, hits)


def path_stats(batch: PathBatch, N: int, M: int, cutoff: int = TV_CUTOFF) -> PathStats:
    cnt = batch.counts()
    last = np.zeros((len(batch), 2), dtype=np.int64)
    nz = cnt > 0
    last[nz] = batch.points[batch.offsets[1:][nz] - 1]
    st = batch.steps()
    return PathStats(cnt / N, last, np.stack([N - last[:, 0], M - last[:, 1]], 1),
                     binned_pairs(st, cutoff), cutoff)


def binned_pairs(pairs: np.ndarray, cutoff: int = TV_CUTOFF) -> np.ndarray:
    """Counts of integer pairs on [0, cutoff)^2 plus one pooled tail cell (last entry)."""
    pairs = np.asarray(pairs).reshape(-1, 2)
    inside = (pairs[:, 0] < cutoff) & (pairs[:, 1] < cutoff)
    flat = pairs[inside, 0] * cutoff + pairs[inside, 1]
    out = np.zeros(cutoff * cutoff + 1)
    out[:-1] = np.bincount(flat, minlength=cutoff * cutoff)
    out[-1] = np.count_nonzero(~inside)
    return out


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p, float) - np.asarray(q, float))))


def _with_tail(grid: np.ndarray, total: float = 1.0) -> np.ndarray:
    flat = grid.ravel()
    return np.append(flat, max(total - math.fsum(flat), 0.0))


def _geometric_free_sum(kf: FreeEndKernel, damping: float, eps: float = 1e-16) -> float:
    """sum_n K_f(n) e^{-damping n} for damping > 0."""
    nmax = max(64, int(math.ceil(-math.log(eps) / damping)) + 1)
    return math.fsum(kf.values(nmax) * np.exp(-damping * np.arange(nmax + 1)))


def cramer_end_law(rate: RateResult, kf: FreeEndKernel, cutoff: int = TV_CUTOFF) -> np.ndarray:
    """Limit law of the free ends (L1, L2) in the Cramer regime, binned with tail cell."""
    a, b = rate.a, rate.b
    if not (a > 0 and b > 0):
        raise RegimeError("end-law dampings must be positive")
    n = np.arange(cutoff)
    fa = kf.values(cutoff - 1) * np.exp(-a * n)
    fb = kf.values(cutoff - 1) * np.exp(-b * n)
    C = _geometric_free_sum(kf, a) * _geometric_free_sum(kf, b)
    return _with_tail(np.outer(fa, fb) / C)


def cramer_step_law(k: Kernel, rate: RateResult, cutoff: int = TV_CUTOFF) -> np.ndarray:
    """Limit inter-arrival law e^h K(i+j) e^{-i a - j b}, binned with tail cell."""
    i = np.arange(cutoff)
    kv = k.values(2 * cutoff)
    grid = math.exp(rate.h) * kv[i[:, None] + i[None, :]] * np.exp(-rate.a * i[:, None] - rate.b * i[None, :])
    grid[0, :] = 0.0
    grid[:, 0] = 0.0
    return _with_tail(grid)


def _z_max(counts: np.ndarray, p: np.ndarray) -> float:
    n = counts.sum()
    ok = (p > 0) & (p < 1)
    z = (counts[ok] / n - p[ok]) / np.sqrt(p[ok] * (1 - p[ok]) / n)
    return float(np.max(np.abs(z))) if z.size else 0.0


def limit_law_report(k: Kernel, kf: FreeEndKernel, sample: FreeSample, h: float,
                     rate: RateResult | None = None, cutoff: int = TV_CUTOFF,
                     mid_box: int = 10) -> LimitLawReport:
    """Empirical end and step laws against the limit laws of the free measure.

    h > 0 needs the Cramer-regime ``rate``; the (L1, L2) law and the pooled
    inter-arrival histogram are compared.  h < 0 picks the law from the
    free-end exponent: (F1, F2) against (1 - e^h) P((i,j) in tau_h) when ends
    are free, (L1, L2) against K_f(i) K_f(j) / (sum K_f)^2 when pinned.
    """
    nsamp = sample.last_contact.shape[0]
    if h > 0:
        if rate is None or rate.regime is not Regime.CRAMER:
            raise RegimeError("the h > 0 limit laws hold in the Cramer regime only")
        if not math.isclose(rate.h, h):
            raise RegimeError("rate result belongs to another h")
        emp = binned_pairs(sample.free_ends, cutoff)
        ref = cramer_end_law(rate, kf, cutoff)
        rep = {"kind": "CramerEnds", "n_samples": nsamp, "tv": tv_distance(emp / nsamp, ref),
               "max_abs_z": _z_max(emp, ref)}
        if sample.paths is not None and sample.paths.points.size:
            st = sample.paths.steps()
            hs = binned_pairs(st, cutoff)
            rep["step_tv"] = tv_distance(hs / hs.sum(), cramer_step_law(k, rate, cutoff))
            rep["n_steps"] = int(st.shape[0])
        return LimitLawReport(**rep)
    if h == 0:
        raise RegimeError("no limit law at h = 0")
    regime = kf.regime(k.alpha)
    if regime == "Boundary":
        raise RegimeError("free-end exponent at the boundary value (1 + alpha)/2")
    if regime == "EndsFree":
        from .exact_dp import build_constrained

        P = np.exp(build_constrained(k, cutoff - 1, cutoff - 1, h).log_Zc)  # g = 0 for h < 0
        ref = _with_tail(-math.expm1(h) * P)
        emp = binned_pairs(sample.last_contact, cutoff)
        kind = "DelocalizedLastContact"
    else:
        lf = kf.values(cutoff - 1)
        ref = _with_tail(np.outer(lf, lf) / kf.total() ** 2)
        emp = binned_pairs(sample.free_ends, cutoff)
        kind = "DelocalizedFreeEnds"
    extra = {}
    if regime == "EndsPinned" and sample.paths is not None:
        N = int(sample.last_contact[0, 0] + sample.free_ends[0, 0])
        M = int(sample.last_contact[0, 1] + sample.free_ends[0, 1])
        pts = sample.paths.points
        ids = np.repeat(np.arange(len(sample.paths)), sample.paths.counts())
        mid = ((pts[:, 0] >= mid_box) & (pts[:, 0] <= N - mid_box)
               & (pts[:, 1] >= mid_box) & (pts[:, 1] <= M - mid_box))
        extra["mid_box_contact_probability"] = np.unique(ids[mid]).size / nsamp
        extra["mid_box_margin"] = mid_box
    return LimitLawReport(kind, nsamp, tv_distance(emp / nsamp, ref), _z_max(emp, ref), extra=extra)


def enumerate_paths(k: Kernel, N: int, M: int, h: float) -> dict[tuple, float]:
    """Exact probabilities of every constrained path on [0, N] x [0, M] (tiny sizes only)."""
    w = math.exp(h) * k.values(N + M)
    out: dict[tuple, float] = {}

    def rec(n, m, pts, weight):
        if n == N and m == M:
            out[tuple(np.array(pts, dtype=np.int64).ravel())] = weight
            return
        for i in range(1, N - n + 1):
            for j in range(1, M - m + 1):
                rec(n + i, m + j, pts + [(n + i, m + j)], weight * w[i + j])

    rec(0, 0, [], 1.0)
    total = math.fsum(out.values())
    return {key: v / total for key, v in out.items()}
