"""Functional summary statistics and global rank envelopes.

Estimators return :class:`SummaryCurve` objects whose undefined values are
NaN. Each estimator also exposes its numerator/denominator parts so that
replicates can be pooled as ratios of sums.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .core import DomainError, PointPattern, Window, as_stream

DEFAULT_GRID_STEPS = 512
BANDWIDTH_FACTOR = 0.15
F_GRID_PER_SIDE = 128


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def unit_sphere_area(d: int) -> float:
    return d * unit_ball_volume(d)


def default_r_grid(window: Window, steps: int = DEFAULT_GRID_STEPS) -> np.ndarray:
    """``steps`` equal steps on [0, a quarter of the shorter side]."""
    return np.linspace(0.0, float(window.sides.min()) / 4, steps + 1)


def default_bandwidth(intensity: float) -> float:
    if not intensity > 0:
        raise DomainError("bandwidth rule needs a positive intensity")
    return BANDWIDTH_FACTOR / math.sqrt(intensity)


@dataclass(frozen=True)
class SummaryCurve:
    statistic: str
    r: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if r.ndim != 1 or v.shape != r.shape:
            raise DomainError("r and values must be 1-d arrays of equal length")
        if len(r) and (r[0] < 0 or np.any(np.diff(r) <= 0)):
            raise DomainError("r grid must be non-negative and strictly increasing")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "values", v)

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "value"])
            for r, v in zip(self.r, self.values):
                w.writerow([f"{r:.17g}", "nan" if not np.isfinite(v) else f"{v:.17g}"])

    @classmethod
    def from_csv(cls, path, statistic: str = "") -> SummaryCurve:
        data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        return cls(statistic, data[:, 0], data[:, 1])


# ---------------------------------------------------------------------------
# Pair statistics
# ---------------------------------------------------------------------------


def _close_pairs(pattern: PointPattern, rmax: float):
    """Distances and edge weights ``1/|W cap W_u|`` of unordered close pairs."""
    pts = pattern.points
    if len(pts) < 2:
        return np.empty(0), np.empty(0)
    tree = cKDTree(pts)
    ij = tree.query_pairs(rmax, output_type="ndarray")
    if len(ij) == 0:
        return np.empty(0), np.empty(0)
    u = pts[ij[:, 1]] - pts[ij[:, 0]]
    dist = np.sqrt(np.sum(u * u, axis=1))
    overlap = pattern.window.overlap_volume(u)
    return dist, 1.0 / overlap


def _epanechnikov(t, h):
    x = t / h
    return np.where(np.abs(x) < 1, 0.75 / h * (1 - x * x), 0.0)


@dataclass(frozen=True)
class PairParts:
    """Edge-corrected pair sums of one pattern, before division by rho^2."""

    numerator: np.ndarray
    n: int
    volume: float


def pcf_parts(pattern: PointPattern, r: np.ndarray, bandwidth: float) -> PairParts:
    """Kernel-smoothed, translation-corrected sum over ordered pairs."""
    r = np.asarray(r, dtype=float)
    d = pattern.dim
    dist, wt = _close_pairs(pattern, float(r[-1]) + bandwidth)
    num = np.zeros_like(r)
    chunk = 4096
    for s in range(0, len(dist), chunk):
        k = _epanechnikov(r[:, None] - dist[None, s:s + chunk], bandwidth)
        num += k @ (2 * wt[s:s + chunk])
    with np.errstate(divide="ignore", invalid="ignore"):
        num = num / (unit_sphere_area(d) * r ** (d - 1))
    if d > 1:
        num[r == 0] = np.nan
    return PairParts(num, len(pattern), pattern.window.volume)


def k_parts(pattern: PointPattern, r: np.ndarray) -> PairParts:
    """Translation-corrected count of ordered pairs within distance r."""
    r = np.asarray(r, dtype=float)
    dist, wt = _close_pairs(pattern, float(r[-1]))
    order = np.argsort(dist)
    cum = np.concatenate([[0.0], np.cumsum(2 * wt[order])])
    idx = np.searchsorted(dist[order], r, side="right")
    return PairParts(cum[idx], len(pattern), pattern.window.volume)


def _single_ratio(parts: PairParts) -> np.ndarray:
    if parts.n < 2:
        return np.full_like(parts.numerator, np.nan)
    return parts.numerator * parts.volume**2 / (parts.n * (parts.n - 1))


def _pooled_ratio(parts: Sequence[PairParts]) -> np.ndarray:
    vols = {round(p.volume, 12) for p in parts}
    if len(vols) != 1:
        raise DomainError("pooling requires replicates observed in equal-volume windows")
    n_total = sum(p.n for p in parts)
    if n_total < 2:
        return np.full_like(parts[0].numerator, np.nan)
    rho = n_total / (len(parts) * parts[0].volume)
    return np.sum([p.numerator for p in parts], axis=0) / (len(parts) * rho * rho)


def _resolve(pattern: PointPattern, window: Window | None) -> PointPattern:
    if window is None:
        return pattern
    return PointPattern(pattern.points[window.contains(pattern.points)], window)


def empirical_pcf(pattern: PointPattern, window: Window | None = None, bandwidth: float | None = None,
                  r_grid=None) -> SummaryCurve:
    """Epanechnikov-kernel PCF estimate with translation edge correction."""
    pattern = _resolve(pattern, window)
    r = default_r_grid(pattern.window) if r_grid is None else np.asarray(r_grid, float)
    if len(pattern) < 2:
        return SummaryCurve("pcf", r, np.full_like(r, np.nan))
    h = default_bandwidth(pattern.intensity) if bandwidth is None else bandwidth
    if not h > 0:
        raise DomainError("bandwidth must be positive")
    return SummaryCurve("pcf", r, _single_ratio(pcf_parts(pattern, r, h)))


def pooled_pcf(patterns: Sequence[PointPattern], bandwidth: float | None = None, r_grid=None,
               return_parts: bool = False):
    """PCF estimate pooled over replicates: summed pair sums over ``R rho_hat^2``."""
    if not patterns:
        raise DomainError("need at least one pattern")
    win = patterns[0].window
    r = default_r_grid(win) if r_grid is None else np.asarray(r_grid, float)
    rho = sum(len(p) for p in patterns) / (len(patterns) * win.volume)
    h = default_bandwidth(rho) if bandwidth is None else bandwidth
    parts = [pcf_parts(p, r, h) for p in patterns]
    curve = SummaryCurve("pcf", r, _pooled_ratio(parts))
    return (curve, parts, h) if return_parts else curve


def _k_to_l(k: np.ndarray, d: int) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return (k / unit_ball_volume(d)) ** (1.0 / d)


def l_function(pattern: PointPattern, window: Window | None = None, r_grid=None) -> SummaryCurve:
    """``L(r) = (K(r)/omega_d)^(1/d)`` with translation-corrected K."""
    pattern = _resolve(pattern, window)
    r = default_r_grid(pattern.window) if r_grid is None else np.asarray(r_grid, float)
    if len(pattern) < 2:
        return SummaryCurve("L", r, np.full_like(r, np.nan))
    return SummaryCurve("L", r, _k_to_l(_single_ratio(k_parts(pattern, r)), pattern.dim))


def pooled_l_function(patterns: Sequence[PointPattern], r_grid=None) -> SummaryCurve:
    win = patterns[0].window
    r = default_r_grid(win) if r_grid is None else np.asarray(r_grid, float)
    k = _pooled_ratio([k_parts(p, r) for p in patterns])
    return SummaryCurve("L", r, _k_to_l(k, win.dim))


# ---------------------------------------------------------------------------
# Nearest-neighbour statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JParts:
    """Border-corrected counts for G and F: hits and at-risk totals per r."""

    g_hit: np.ndarray
    g_risk: np.ndarray
    f_hit: np.ndarray
    f_risk: np.ndarray


def _reduced_sample(dist: np.ndarray, border: np.ndarray, r: np.ndarray):
    """Per r: ``#{dist <= r <= border}`` and ``#{r <= border}``; ``r`` ascending.

    Each point counts on the grid index interval ``[lo, hi)``, so the
    totals are cumulative sums of interval end points.
    """
    m = len(r)
    lo = np.searchsorted(r, dist, side="left")
    hi = np.searchsorted(r, border, side="right")
    ok = lo < hi
    hit = np.cumsum(np.bincount(lo[ok], minlength=m + 1) - np.bincount(hi[ok], minlength=m + 1))
    risk = len(border) - np.cumsum(np.bincount(hi, minlength=m + 1))
    return hit[:m].astype(float), risk[:m].astype(float)


def _reference_grid(window: Window, per_side: int = F_GRID_PER_SIDE) -> np.ndarray:
    step = float(window.sides.min()) / per_side
    axes = [np.arange(lo + step / 2, hi, step) for lo, hi in zip(window.lower, window.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def j_parts(pattern: PointPattern, r: np.ndarray) -> JParts:
    r = np.asarray(r, dtype=float)
    win = pattern.window
    ref = _reference_grid(win)
    zeros = np.zeros_like(r)
    if len(pattern) == 0:
        f_risk = _reduced_sample(np.full(len(ref), np.inf), win.border_distance(ref), r)[1]
        return JParts(zeros, zeros, zeros, f_risk)
    tree = cKDTree(pattern.points)
    e, _ = tree.query(ref, k=1)
    f_hit, f_risk = _reduced_sample(e, win.border_distance(ref), r)
    if len(pattern) < 2:
        g_hit, g_risk = zeros, _reduced_sample(np.full(1, np.inf), win.border_distance(pattern.points), r)[1]
    else:
        nn, _ = tree.query(pattern.points, k=2)
        g_hit, g_risk = _reduced_sample(nn[:, 1], win.border_distance(pattern.points), r)
    return JParts(g_hit, g_risk, f_hit, f_risk)


def _j_from_parts(g_hit, g_risk, f_hit, f_risk):
    with np.errstate(divide="ignore", invalid="ignore"):
        G = g_hit / g_risk
        F = f_hit / f_risk
        J = (1 - G) / (1 - F)
    J[~np.isfinite(J) | (F >= 1) | (g_risk == 0) | (f_risk == 0)] = np.nan
    return J


def j_function(pattern: PointPattern, window: Window | None = None, r_grid=None) -> SummaryCurve:
    """``J = (1 - G)/(1 - F)`` with border-corrected G and F; NaN where undefined."""
    pattern = _resolve(pattern, window)
    r = default_r_grid(pattern.window) if r_grid is None else np.asarray(r_grid, float)
    if len(pattern) == 0:
        return SummaryCurve("J", r, np.full_like(r, np.nan))
    p = j_parts(pattern, r)
    return SummaryCurve("J", r, _j_from_parts(p.g_hit, p.g_risk, p.f_hit, p.f_risk))


def pooled_j_function(patterns: Sequence[PointPattern], r_grid=None) -> SummaryCurve:
    win = patterns[0].window
    r = default_r_grid(win) if r_grid is None else np.asarray(r_grid, float)
    parts = [j_parts(p, r) for p in patterns]
    tot = [np.sum([getattr(p, k) for p in parts], axis=0) for k in ("g_hit", "g_risk", "f_hit", "f_risk")]
    return SummaryCurve("J", r, _j_from_parts(*tot))


STATISTICS = {"pcf": empirical_pcf, "L": l_function, "J": j_function}


def summary(statistic: str, pattern: PointPattern, r_grid=None, **kw) -> SummaryCurve:
    try:
        fn = STATISTICS[statistic]
    except KeyError:
        raise DomainError(f"unknown statistic {statistic!r}") from None
    return fn(pattern, r_grid=r_grid, **kw)


# ---------------------------------------------------------------------------
# Theory on the estimator's scale
# ---------------------------------------------------------------------------


def smoothed_pcf(g: Callable, r, bandwidth: float, dim: int = 2) -> np.ndarray:
    """Expectation of the kernel PCF estimator when the true PCF is ``g``.

    ``(1/r^(d-1)) int k_h(r - s) s^(d-1) g(s) ds`` by adaptive quadrature;
    NaN at r = 0 for d > 1.
    """
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    for i, ri in enumerate(r):
        if ri == 0 and dim > 1:
            out[i] = np.nan
            continue
        lo, hi = max(0.0, ri - bandwidth), ri + bandwidth
        val, _ = integrate.quad(lambda s: _epanechnikov(ri - s, bandwidth) * s ** (dim - 1) * g(s),
                                lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
        out[i] = val / ri ** (dim - 1)
    return out


# ---------------------------------------------------------------------------
# Global rank envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvelopeResult:
    r: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    verdict: str
    p_value: float
    level: float
    measure: str = "extreme rank length"

    @property
    def inside(self) -> bool:
        return self.verdict == "inside"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "lo", "hi", "observed"])
            for row in zip(self.r, self.lower, self.upper, self.observed):
                w.writerow([f"{v:.17g}" for v in row])


def extreme_rank_length(curves: np.ndarray) -> np.ndarray:
    """Extreme rank length measure ``c_j`` for each row of ``curves``.

    Pointwise two-sided ranks are sorted per curve and compared
    lexicographically; ``c_j`` is the fraction of curves at least as
    extreme as curve j, so small values flag extreme curves.
    """
    n = curves.shape[0]
    low = rankdata(curves, method="min", axis=0)
    high = (n + 1) - rankdata(curves, method="max", axis=0)
    ranks = np.sort(np.minimum(low, high), axis=1)
    order = np.lexsort(ranks.T[::-1])
    srt = ranks[order]
    same = np.all(srt[1:] == srt[:-1], axis=1)
    # last position of each tie group, propagated backwards
    group_end = np.arange(n)
    for i in range(n - 2, -1, -1):
        if same[i]:
            group_end[i] = group_end[i + 1]
    c = np.empty(n)
    c[order] = (group_end + 1) / n
    return c


def global_rank_envelope(observed: SummaryCurve, simulations: Sequence[SummaryCurve],
                         level: float = 0.95) -> EnvelopeResult:
    """Global extreme-rank-length envelope and test.

    Grid points where any curve is undefined are dropped. The envelope is
    the pointwise range of the curves whose measure exceeds ``1 - level``;
    the verdict is geometric: inside iff the observed curve never leaves it.
    """
    if len(simulations) < 2:
        raise DomainError("need at least two simulated curves")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    r = observed.r
    for s in simulations:
        if s.r.shape != r.shape or not np.allclose(s.r, r, rtol=0, atol=1e-12 * max(1.0, r[-1])):
            raise DomainError("all curves must share the same r grid")
    data = np.vstack([observed.values] + [s.values for s in simulations])
    keep = np.all(np.isfinite(data), axis=0)
    if not keep.any():
        raise DomainError("no grid point where every curve is defined")
    data = data[:, keep]
    c = extreme_rank_length(data)
    central = c > 1 - level
    lo = data[central].min(axis=0)
    hi = data[central].max(axis=0)
    obs = data[0]
    inside = bool(np.all((obs >= lo) & (obs <= hi)))
    return EnvelopeResult(r[keep], lo, hi, obs, "inside" if inside else "outside", float(c[0]), level)


def bootstrap_pooled_test(reference: np.ndarray, parts: Sequence[PairParts], r: np.ndarray,
                          n_boot: int = 999, level: float = 0.95, rng=None,
                          statistic: str = "pcf") -> EnvelopeResult:
    """Is ``reference`` compatible with the pooled estimate from ``parts``?

    Replicates are resampled with replacement; the pooled curve of each
    resample enters a global rank envelope with ``reference`` as the
    observed curve.
    """
    rng = as_stream(rng)
    g = rng.generator
    n = len(parts)
    sims = []
    for _ in range(n_boot):
        idx = g.integers(0, n, size=n)
        sims.append(SummaryCurve(statistic, r, _pooled_ratio([parts[i] for i in idx])))
    return global_rank_envelope(SummaryCurve(statistic, r, reference), sims, level)


def two_sample_envelope_test(curves_a: np.ndarray, curves_b: np.ndarray, r: np.ndarray,
                             n_perm: int = 999, level: float = 0.95, rng=None) -> EnvelopeResult:
    """Permutation test of equal mean curves in two samples.

    The statistic is the difference of group mean curves; permuted
    differences form the global rank envelope.
    """
    rng = as_stream(rng)
    g = rng.generator
    a = np.asarray(curves_a, float)
    b = np.asarray(curves_b, float)
    both = np.vstack([a, b])
    keep = np.all(np.isfinite(both), axis=0)
    both = both[:, keep]
    na = len(a)

    def diff(rows):
        return both[rows[:na]].mean(axis=0) - both[rows[na:]].mean(axis=0)

    obs = diff(np.arange(len(both)))
    sims = [diff(g.permutation(len(both))) for _ in range(n_perm)]
    rk = r[keep]
    return global_rank_envelope(SummaryCurve("diff", rk, obs),
                                [SummaryCurve("diff", rk, s) for s in sims], level)
