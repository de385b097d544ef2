"""The generation mechanism: clustering, thinning, retention and noise."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (CountDistribution, DisplacementDensity, DomainError, GaussianDisplacement,
                   PointPattern, RandomStream, UniformBallDisplacement, Window, as_stream)
from .noise import noise_intensity, pcf_coefficient, sample_noise

# parents are processed in fixed blocks, each with its own stream, so the
# result does not depend on how blocks are scheduled
PARENT_BLOCK = 4096


@dataclass(frozen=True)
class ChainParams:
    """One generation's reproduction system.

    ``p`` is the probability that an offspring survives thinning, ``q`` the
    probability that a parent is retained, ``noise`` a noise specification
    or ``None``.
    """

    count: CountDistribution
    displacement: DisplacementDensity
    p: float = 1.0
    q: float = 0.0
    noise: object = None

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise DomainError(f"thinning probability p={self.p} outside [0, 1]")
        if not (0.0 <= self.q <= 1.0):
            raise DomainError(f"retention probability q={self.q} outside [0, 1]")

    @property
    def beta(self) -> float:
        return float(self.count.mean)

    @property
    def nu(self) -> float:
        return float(self.count.variance)

    @property
    def growth(self) -> float:
        """Mean number of next-generation points per parent, ``beta p + q``."""
        return self.beta * self.p + self.q

    @property
    def rho_z(self) -> float:
        return noise_intensity(self.noise)

    @property
    def dim(self) -> int:
        return self.displacement.dim

    def generation_model(self, convention: str = "exact"):
        """Closed-form counterpart (Gaussian displacements only)."""
        from .theory import GenerationModel

        if not isinstance(self.displacement, GaussianDisplacement):
            raise DomainError("closed-form PCFs need a Gaussian displacement density")
        coef = pcf_coefficient(self.noise, self.dim, convention)
        noise = coef.kernel() if self.rho_z > 0 else None
        return GenerationModel(self.beta, self.nu, self.displacement.variance, self.p, self.q,
                               self.rho_z, noise)


@dataclass(frozen=True)
class GenerationTrace:
    """A generation split by provenance: offspring, retained parents, noise."""

    offspring: PointPattern
    retained: PointPattern
    noise: PointPattern

    @property
    def window(self) -> Window:
        return self.offspring.window

    @property
    def pattern(self) -> PointPattern:
        return self.offspring.union(self.retained, self.noise)

    def __len__(self) -> int:
        return len(self.offspring) + len(self.retained) + len(self.noise)

    def restrict(self, window: Window) -> GenerationTrace:
        return GenerationTrace(self.offspring.restrict(window), self.retained.restrict(window),
                               self.noise.restrict(window))


def _reproduce_block(parents: np.ndarray, params: ChainParams, rng: RandomStream):
    n = len(parents)
    counts = np.asarray(params.count.sample(rng.split("count"), size=n), dtype=np.int64)
    total = int(counts.sum())
    src = np.repeat(np.arange(n), counts)
    kids = parents[src] + params.displacement.sample(rng.split("displace"), total)
    if params.p < 1.0:
        alive = rng.split("thin").uniform(size=total) < params.p
        kids, src = kids[alive], src[alive]
    if params.q > 0.0:
        kept = np.flatnonzero(rng.split("retain").uniform(size=n) < params.q)
    else:
        kept = np.empty(0, dtype=np.int64)
    return kids, src, kept


def reproduce(parents: np.ndarray, params: ChainParams, rng: RandomStream,
              workers: int | None = None, return_sources: bool = False):
    """Thinned offspring and retained parents of an array of parent points.

    With ``return_sources`` the parent index of every offspring and the
    indices of the retained parents are returned as well.
    """
    parents = np.asarray(parents, dtype=float).reshape(-1, params.dim)
    starts = list(range(0, len(parents), PARENT_BLOCK))
    jobs = [(parents[s:s + PARENT_BLOCK], rng.split("block", b)) for b, s in enumerate(starts)]
    if workers and workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda job: _reproduce_block(job[0], params, job[1]), jobs))
    else:
        results = [_reproduce_block(blk, params, sub) for blk, sub in jobs]
    d = params.dim
    if not results:
        empty = np.empty(0, dtype=np.int64)
        out = (np.empty((0, d)), np.empty((0, d)))
        return out + (empty, empty) if return_sources else out
    kid_src = np.concatenate([r[1] + s for r, s in zip(results, starts)])
    kept_idx = np.concatenate([r[2] + s for r, s in zip(results, starts)])
    kids = np.concatenate([r[0] for r in results])
    kept = parents[kept_idx]
    if return_sources:
        return kids, kept, kid_src, kept_idx
    return kids, kept


def step_generation(prev: PointPattern, params: ChainParams, sim_window: Window, rng=None,
                    workers: int | None = None) -> GenerationTrace:
    """Apply one generation of the chain to ``prev``.

    Every point of ``prev`` is a parent, wherever it lies; offspring are not
    clipped, so the caller controls buffering. The noise is drawn on
    ``sim_window``.
    """
    rng = as_stream(rng)
    if prev.dim != params.dim:
        raise DomainError("pattern and displacement dimensions differ")
    kids, kept = reproduce(prev.points, params, rng.split("reproduce"), workers)
    noise = sample_noise(params.noise, sim_window, rng.split("noise"))
    return GenerationTrace(PointPattern(kids, sim_window), PointPattern(kept, sim_window), noise)


def _buffer_scale(f: DisplacementDensity, buffer_multiplier: float) -> float:
    if buffer_multiplier == 0:
        return 0.0
    if not isinstance(f, (GaussianDisplacement, UniformBallDisplacement)):
        raise DomainError(f"no dilation rule for displacement {type(f).__name__}")
    return f.scale


def simulation_windows(target: Window, params: Sequence[ChainParams], buffer_multiplier: float):
    """Windows ``W_0, ..., W_n`` for an n-generation run.

    ``W_i`` dilates the target by ``buffer_multiplier`` times the spread of
    the remaining ``n - i`` displacements, ``sqrt(sum_{j>i} scale_j^2)``;
    for a constant system this is ``buffer_multiplier sqrt(n - i) scale``.
    """
    if buffer_multiplier < 0:
        raise DomainError("buffer multiplier must be non-negative")
    sq = [_buffer_scale(pr.displacement, buffer_multiplier) ** 2 for pr in params]
    n = len(params)
    return [target.dilate(buffer_multiplier * math.sqrt(math.fsum(sq[i:]))) for i in range(n + 1)]


def simulate_chain(initial: PointPattern, params, n_gens: int, target_window: Window,
                   buffer_multiplier: float = 4.0, rng=None, workers: int | None = None,
                   clip: bool = True) -> list[GenerationTrace]:
    """Run the chain for ``n_gens`` generations from ``initial``.

    ``params`` is either one :class:`ChainParams` or a sequence with one
    entry per generation. Points outside the current simulation window are
    dropped before reproducing. Returned traces are clipped to
    ``target_window`` unless ``clip`` is false.
    """
    if n_gens < 1:
        raise DomainError("n_gens must be at least 1")
    if isinstance(params, ChainParams):
        plist = [params] * n_gens
    else:
        plist = list(params)
        if len(plist) != n_gens:
            raise DomainError(f"expected {n_gens} parameter sets, got {len(plist)}")
    rng = as_stream(rng)
    windows = simulation_windows(target_window, plist, buffer_multiplier)
    current = initial.restrict(windows[0])
    traces = []
    for i in range(1, n_gens + 1):
        win = windows[i]
        tr = step_generation(current, plist[i - 1], win, rng.split("generation", i), workers)
        tr = tr.restrict(win)
        current = tr.pattern
        traces.append(tr.restrict(target_window) if clip else tr)
    return traces


def intensity_after_n(rho0: float, per_gen: Sequence[tuple[float, float, float, float]]) -> float:
    """Intensity after the generations ``(beta, p, q, rho_z)`` in ``per_gen``.

    The recursion ``rho_n = rho_{n-1} (beta p + q) + rho_z`` is cross-checked
    against its closed double-product form.
    """
    if not rho0 > 0:
        raise DomainError("initial intensity must be positive")
    gens = [tuple(float(v) for v in g) for g in per_gen]
    for g in gens:
        if min(g) < 0:
            raise DomainError("generation parameters must be non-negative")
    rho = float(rho0)
    for beta, p, q, rz in gens:
        rho = rho * (beta * p + q) + rz
    growth = [beta * p + q for beta, p, q, _ in gens]
    n = len(gens)
    terms = [rho0 * math.prod(growth)]
    terms += [gens[i][3] * math.prod(growth[i + 1:]) for i in range(n)]
    closed = math.fsum(terms)
    if abs(rho - closed) > 1e-12 * max(abs(rho), abs(closed)) + 1e-300:
        raise AssertionError(f"intensity recursion {rho!r} disagrees with closed form {closed!r}")
    return rho
