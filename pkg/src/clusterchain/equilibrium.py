"""Approximate sampling of the chain's invariant distribution, and families.

The invariant pattern at time 0 is the noise of time 0 together with the
surviving descendants of all earlier noise points. We start ``n`` steps in
the past (the horizon), ignore ancestors whose descendants are unlikely to
reach the window, and run forward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainParams, _buffer_scale, reproduce
from .core import DomainError, PointPattern, Window, as_stream
from .noise import sample_noise, thinned_noise

DEFAULT_EPSILON = 1e-3
# cap on candidate family roots simulated together when conditioning on survival
CANDIDATE_CAP = 200_000


def horizon(rho_g: float, growth: float, epsilon: float) -> int:
    """Smallest ``m >= 0`` with ``rho_g * growth**(m + 1) <= epsilon``.

    ``rho_g * growth**(m + 1)`` is the intensity of the invariant pattern
    left out when ancestors older than ``m`` generations are ignored.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not (0 <= growth < 1):
        raise DomainError(f"no finite horizon for beta*p + q = {growth}")
    if rho_g < 0:
        raise DomainError("intensity must be non-negative")
    if growth == 0 or rho_g * growth <= epsilon:
        return 0
    m = max(0, math.ceil(math.log(epsilon / rho_g) / math.log(growth)) - 1)
    # guard the logarithms against rounding at the boundary
    while m > 0 and rho_g * growth ** m <= epsilon:
        m -= 1
    while rho_g * growth ** (m + 1) > epsilon:
        m += 1
    return m


def family_load_bound(volume: float, rho_g: float, growth: float) -> float:
    """Mean number of points in a set of the given volume that belong to
    families started by generation-0 points of the invariant pattern.

    This bounds the mean last time such a family visits the set.
    """
    if not (0 <= growth < 1):
        raise DomainError(f"need beta*p + q < 1, got {growth}")
    if volume < 0 or rho_g < 0:
        raise DomainError("volume and intensity must be non-negative")
    return volume * rho_g * growth / (1 - growth)


@dataclass(frozen=True)
class EquilibriumConfig:
    """Reproduction system, target region and precision for the sampler."""

    params: ChainParams
    window: Window
    epsilon: float = DEFAULT_EPSILON
    buffer_multiplier: float = 4.0

    def __post_init__(self):
        if not self.params.growth < 1:
            raise DomainError(f"equilibrium needs beta*p + q < 1, got {self.params.growth}")
        if not self.params.rho_z > 0:
            raise DomainError("equilibrium needs noise with positive intensity")
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if self.buffer_multiplier < 0:
            raise DomainError("buffer multiplier must be non-negative")
        _buffer_scale(self.params.displacement, self.buffer_multiplier)

    @property
    def intensity(self) -> float:
        return self.params.rho_z / (1 - self.params.growth)

    @property
    def horizon(self) -> int:
        return horizon(self.intensity, self.params.growth, self.epsilon)

    def window_at(self, lag: int) -> Window:
        """Region kept for points ``lag`` steps before time 0."""
        scale = _buffer_scale(self.params.displacement, self.buffer_multiplier)
        return self.window.dilate(self.buffer_multiplier * math.sqrt(lag) * scale)


def survival_probabilities(params: ChainParams, n: int) -> np.ndarray:
    """``P(a family started by one point is non-empty after m steps)``, m = 0..n."""
    out = np.empty(n + 1)
    out[0] = 1.0
    p, q = params.p, params.q
    for m in range(1, n + 1):
        x = out[m - 1]
        hit = params.count.hit_probability(p * x)
        out[m] = hit + q * x * (1 - hit)
    return out


def simulate_equilibrium(cfg: EquilibriumConfig, rng=None, workers: int | None = None,
                         n_steps: int | None = None, method: str = "thinned") -> PointPattern:
    """Approximate draw of the invariant pattern on ``cfg.window``.

    Noise at lag k lives on the window dilated by
    ``buffer_multiplier sqrt(k) scale``; descendants are propagated forward
    from lag ``n`` (the horizon unless ``n_steps`` is given), and a point is
    dropped as soon as it leaves the current dilated window. Retained
    parents are carried forward as their own children.

    ``method="direct"`` runs this literally. ``method="thinned"`` (default)
    samples the same law faster: a lag-k noise point can only matter if its
    family survives k steps, which happens independently with a known
    probability, so the noise at lag k is drawn already thinned by that
    probability and each kept ancestor receives a family conditioned on
    survival (by rejection).
    """
    rng = as_stream(rng)
    n = cfg.horizon if n_steps is None else int(n_steps)
    if n < 0:
        raise DomainError("n_steps must be non-negative")
    if method == "direct":
        pts = _equilibrium_direct(cfg, n, rng, workers)
    elif method == "thinned":
        pts = _equilibrium_thinned(cfg, n, rng, workers)
    else:
        raise DomainError(f"unknown equilibrium method {method!r}")
    return PointPattern(pts, cfg.window).restrict(cfg.window)


def _equilibrium_direct(cfg: EquilibriumConfig, n: int, rng, workers):
    params = cfg.params
    current = sample_noise(params.noise, cfg.window_at(n), rng.split("noise", n)).points
    for lag in range(n - 1, -1, -1):
        win = cfg.window_at(lag)
        kids, kept = reproduce(current, params, rng.split("offspring", lag), workers)
        moved = np.concatenate([kids, kept])
        moved = moved[win.contains(moved)]
        fresh = sample_noise(params.noise, win, rng.split("noise", lag)).points
        current = np.concatenate([moved, fresh])
    return current


def _equilibrium_thinned(cfg: EquilibriumConfig, n: int, rng, workers):
    params = cfg.params
    surv = survival_probabilities(params, n)
    out = [sample_noise(params.noise, cfg.window_at(0), rng.split("noise", 0)).points]
    for lag in range(1, n + 1):
        if surv[lag] == 0:
            break
        spec = thinned_noise(params.noise, float(surv[lag]))
        anc = sample_noise(spec, cfg.window_at(lag), rng.split("noise", lag)).points
        if len(anc):
            out.append(_conditioned_descendants(anc, lag, float(surv[lag]), cfg,
                                                rng.split("families", lag), workers))
    return np.concatenate(out)


def _conditioned_descendants(anc: np.ndarray, lag: int, survival: float, cfg: EquilibriumConfig,
                             rng, workers) -> np.ndarray:
    """Time-0 descendants of ``anc`` (noise at ``lag``), each family
    conditioned on being non-empty after ``lag`` steps.

    Candidate families are simulated without windows to decide survival;
    alongside, each point carries a flag recording whether its whole line
    of descent stayed inside the shrinking windows, and only flagged points
    are returned.
    """
    params = cfg.params
    windows = [cfg.window_at(k) for k in range(lag + 1)]
    pending = np.arange(len(anc))
    found = []
    rnd = 0
    while len(pending):
        per = int(min(max(1, math.ceil(1.5 / survival)), max(1, CANDIDATE_CAP // len(pending))))
        pts = np.repeat(anc[pending], per, axis=0)
        owner = np.arange(len(pts))
        flag = np.ones(len(pts), dtype=bool)
        stream = rng.split("round", rnd)
        for j in range(1, lag + 1):
            kids, kept, src, kept_idx = reproduce(pts, params, stream.split("generation", j), workers,
                                                  return_sources=True)
            pts = np.concatenate([kids, kept])
            owner = np.concatenate([owner[src], owner[kept_idx]])
            flag = np.concatenate([flag[src], flag[kept_idx]]) & windows[lag - j].contains(pts)
            if len(pts) == 0:
                break
        alive = np.zeros(len(pending) * per, dtype=bool)
        alive[owner] = True
        alive = alive.reshape(len(pending), per)
        done = alive.any(axis=1)
        first = np.argmax(alive, axis=1)
        chosen = np.flatnonzero(done) * per + first[done]
        keep = np.isin(owner, chosen) & flag
        found.append(pts[keep])
        pending = pending[~done]
        rnd += 1
    return np.concatenate(found) if found else np.empty((0, anc.shape[1]))


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    """Descendants of one ancestor, generation by generation.

    ``generations[m - 1]`` holds the points of generation m. The list ends
    with the first empty generation (``extinction_generation``) unless the
    run hit ``max_gen``, in which case ``truncated`` is true and
    ``extinction_generation`` is None.
    """

    ancestor: np.ndarray
    generations: list = field(default_factory=list)
    extinction_generation: int | None = None
    truncated: bool = False

    def generation(self, m: int) -> np.ndarray:
        if m < 1:
            raise DomainError("generations are numbered from 1")
        if m <= len(self.generations):
            return self.generations[m - 1]
        if self.truncated:
            raise DomainError(f"generation {m} lies beyond the truncated run")
        return np.empty((0, len(self.ancestor)))

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.generations)


def default_max_gen(params: ChainParams, epsilon: float = DEFAULT_EPSILON) -> int:
    """Ten times the horizon of the system (at least 10)."""
    rho = params.rho_z / (1 - params.growth) if params.rho_z > 0 else 1.0
    return 10 * max(1, horizon(rho, params.growth, epsilon))


def _check_subcritical(params: ChainParams):
    if not params.growth < 1:
        raise DomainError(f"families need beta*p + q < 1 to die out, got {params.growth}")


def simulate_family(ancestor, params: ChainParams, rng=None, max_gen: int | None = None) -> Family:
    """Iterate offspring and retention from a single ancestor until extinction."""
    _check_subcritical(params)
    rng = as_stream(rng)
    if max_gen is None:
        max_gen = default_max_gen(params)
    if max_gen < 1:
        raise DomainError("max_gen must be at least 1")
    x = np.asarray(ancestor, dtype=float).reshape(1, params.dim)
    current = x
    gens = []
    for m in range(1, max_gen + 1):
        kids, kept = reproduce(current, params, rng.split("generation", m))
        current = np.concatenate([kids, kept])
        gens.append(current)
        if len(current) == 0:
            return Family(x[0], gens, m, False)
    return Family(x[0], gens, None, True)


@dataclass(frozen=True)
class FamilyLoad:
    """Per-ancestor visits of many families to a region ``K``.

    ``counts[j]`` is the number of points of family j inside K over all
    generations, ``last_visit[j]`` the last generation with a point in K
    (0 if none) and ``extinction[j]`` the first empty generation (-1 if the
    run was truncated).
    """

    counts: np.ndarray
    last_visit: np.ndarray
    extinction: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def last_time(self) -> int:
        return int(self.last_visit.max()) if len(self.last_visit) else 0

    @property
    def truncated(self) -> bool:
        return bool(np.any(self.extinction < 0))


def simulate_families(ancestors, params: ChainParams, region: Window, rng=None,
                      max_gen: int | None = None, workers: int | None = None) -> FamilyLoad:
    """Run the families of all ``ancestors`` jointly and record their visits to ``region``."""
    _check_subcritical(params)
    rng = as_stream(rng)
    if max_gen is None:
        max_gen = default_max_gen(params)
    anc = np.asarray(ancestors, dtype=float).reshape(-1, params.dim)
    n_anc = len(anc)
    counts = np.zeros(n_anc, dtype=np.int64)
    last = np.zeros(n_anc, dtype=np.int64)
    extinct = np.full(n_anc, -1, dtype=np.int64)
    pts, owner = anc, np.arange(n_anc)
    for m in range(1, max_gen + 1):
        kids, kept, src, kept_idx = reproduce(pts, params, rng.split("generation", m), workers,
                                              return_sources=True)
        pts = np.concatenate([kids, kept])
        owner = np.concatenate([owner[src], owner[kept_idx]])
        alive = np.zeros(n_anc, dtype=bool)
        alive[owner] = True
        newly_dead = (~alive) & (extinct < 0)
        extinct[newly_dead] = m
        inside = owner[region.contains(pts)]
        if inside.size:
            counts += np.bincount(inside, minlength=n_anc)
            last[np.unique(inside)] = m
        if len(pts) == 0:
            break
    return FamilyLoad(counts, last, extinct)
