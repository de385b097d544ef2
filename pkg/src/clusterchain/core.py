"""Foundational types shared by the samplers and the analytic code.

Point patterns and windows, offspring count laws, displacement densities and
a splittable random stream whose output depends only on the seed and on the
path of labels used to reach it.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


class ClusterChainError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ClusterChainError, ValueError):
    """A parameter lies outside the domain where an operation is defined."""


class ExistenceError(DomainError):
    """The requested point process does not exist for these parameters."""


class ConfigError(ClusterChainError, ValueError):
    """A run configuration is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

Label = Union[int, str]


def _label_key(label: Label) -> int:
    # ints and strings live in disjoint halves of the key space
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer labels must be non-negative")
        return 2 * int(label)
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return 2 * int.from_bytes(digest, "little") + 1
    raise TypeError(f"unsupported stream label {label!r}")


class RandomStream:
    """Deterministic, splittable source of random variates.

    A stream is identified by ``(seed, path)``. ``split(label)`` returns a
    child whose identity is the parent's path extended by ``label``; drawing
    from a parent never changes what a child produces, so work keyed by
    structural labels (generation, block, purpose) gives identical output no
    matter in which order, or on how many workers, it is evaluated.

    Draws use the counter-based Philox bit generator.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if int(seed) < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        self._gen: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={self.path})"

    def __getstate__(self):
        return (self.seed, self.path)

    def __setstate__(self, state):
        self.seed, self.path = state
        self._gen = None

    def split(self, *labels: Label) -> RandomStream:
        return RandomStream(self.seed, self.path + tuple(_label_key(x) for x in labels))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)

    def draw(self, dist: CountDistribution, size=None):
        """Draw from a count distribution."""
        return dist.sample(self, size)


def as_stream(rng: RandomStream | int | None) -> RandomStream:
    if isinstance(rng, RandomStream):
        return rng
    if rng is None:
        return RandomStream(int(np.random.SeedSequence().entropy % (2**63)))
    return RandomStream(int(rng))


# ---------------------------------------------------------------------------
# Windows and patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """Axis-aligned box ``[lower, upper]`` in d dimensions."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) == 0:
            raise DomainError("window corners must have the same positive dimension")
        if not all(math.isfinite(v) for v in lo + hi):
            raise DomainError("window corners must be finite")
        if not all(a < b for a, b in zip(lo, hi)):
            raise DomainError(f"window needs lower < upper in every coordinate, got {lo}, {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, dim: int = 2) -> Window:
        return cls((0.0,) * dim, (1.0,) * dim)

    @classmethod
    def box(cls, side: float, dim: int = 2, centre: float = 0.5) -> Window:
        half = side / 2
        return cls((centre - half,) * dim, (centre + half,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def dilate(self, r: float) -> Window:
        """Smallest box containing the Minkowski sum with a ball of radius r."""
        if r < 0:
            raise DomainError("dilation radius must be non-negative")
        return Window(tuple(v - r for v in self.lower), tuple(v + r for v in self.upper))

    def translate(self, shift) -> Window:
        shift = np.broadcast_to(np.asarray(shift, float), (self.dim,))
        return Window(tuple(np.asarray(self.lower) + shift), tuple(np.asarray(self.upper) + shift))

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, float).reshape(-1, self.dim)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def border_distance(self, points) -> np.ndarray:
        """Distance from each point to the window boundary (0 outside)."""
        pts = np.asarray(points, float).reshape(-1, self.dim)
        d = np.minimum(pts - self.lower, np.asarray(self.upper) - pts)
        return np.clip(d.min(axis=1), 0.0, None)

    def overlap_volume(self, shifts) -> np.ndarray:
        """``|W ∩ (W + u)|`` for each row u of ``shifts``."""
        u = np.abs(np.asarray(shifts, float).reshape(-1, self.dim))
        return np.prod(np.clip(self.sides - u, 0.0, None), axis=1)

    def uniform(self, n: int, rng: RandomStream) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(int(n), self.dim))


@dataclass(frozen=True)
class PointPattern:
    """A finite set of points in d dimensions observed in ``window``."""

    points: np.ndarray
    window: Window

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.size == 0:
            pts = pts.reshape(0, self.window.dim)
        if pts.ndim != 2 or pts.shape[1] != self.window.dim:
            raise DomainError(
                f"points must have shape (n, {self.window.dim}), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, window: Window) -> PointPattern:
        return cls(np.empty((0, window.dim)), window)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.window.dim

    @property
    def intensity(self) -> float:
        return len(self) / self.window.volume

    def restrict(self, window: Window) -> PointPattern:
        """Points inside ``window``, observed in ``window``."""
        return PointPattern(self.points[window.contains(self.points)], window)

    def union(self, *others: PointPattern) -> PointPattern:
        arrays = [self.points] + [o.points for o in others]
        return PointPattern(np.concatenate(arrays, axis=0), self.window)

    def translate(self, shift) -> PointPattern:
        return PointPattern(self.points + np.asarray(shift, float), self.window.translate(shift))


def grid_pattern(window: Window, spacing: float) -> PointPattern:
    """Deterministic square lattice filling ``window``, offset half a cell."""
    axes = [np.arange(lo + spacing / 2, hi, spacing) for lo, hi in zip(window.lower, window.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return PointPattern(np.stack([m.ravel() for m in mesh], axis=1), window)


# ---------------------------------------------------------------------------
# Offspring counts
# ---------------------------------------------------------------------------


class CountDistribution:
    """Law of the number of points in one cluster."""

    mean: float
    variance: float

    def sample(self, rng: RandomStream, size=None):
        raise NotImplementedError

    def hit_probability(self, x: float) -> float:
        """``1 - E[(1 - x)^N]``: chance that at least one of N points is marked
        when each is marked independently with probability x."""
        raise NotImplementedError

    @property
    def dispersion_c(self) -> float:
        return cluster_dispersion_c(self.mean, self.variance)


@dataclass(frozen=True)
class PoissonCount(CountDistribution):
    mean: float

    def __post_init__(self):
        if not (self.mean >= 0 and math.isfinite(self.mean)):
            raise DomainError("Poisson mean must be finite and non-negative")

    @property
    def variance(self) -> float:
        return self.mean

    def sample(self, rng, size=None):
        return rng.generator.poisson(self.mean, size)

    def hit_probability(self, x):
        return -math.expm1(-self.mean * x)


@dataclass(frozen=True)
class BernoulliCount(CountDistribution):
    mean: float

    def __post_init__(self):
        if not 0 <= self.mean <= 1:
            raise DomainError("Bernoulli parameter must lie in [0, 1]")

    @property
    def variance(self) -> float:
        return self.mean * (1 - self.mean)

    def sample(self, rng, size=None):
        return (rng.generator.random(size) < self.mean).astype(np.int64)

    def hit_probability(self, x):
        return self.mean * x


@dataclass(frozen=True)
class NegativeBinomialCount(CountDistribution):
    """Negative binomial with the given mean and dispersion r.

    The variance is ``mean + mean**2 / r``.
    """

    mean: float
    dispersion: float

    def __post_init__(self):
        if not (self.mean >= 0 and math.isfinite(self.mean)):
            raise DomainError("negative binomial mean must be finite and non-negative")
        if not self.dispersion > 0:
            raise DomainError("negative binomial dispersion must be positive")

    @classmethod
    def from_c(cls, mean: float, c: float) -> NegativeBinomialCount:
        """Build the law with a prescribed ``E[N(N-1)] / mean**2 = c`` (needs c > 1)."""
        if c <= 1:
            raise DomainError("negative binomial requires c > 1 (overdispersion)")
        return cls(mean, 1.0 / (c - 1.0))

    @property
    def variance(self) -> float:
        return self.mean + self.mean**2 / self.dispersion

    @property
    def success_probability(self) -> float:
        return self.dispersion / (self.dispersion + self.mean)

    def sample(self, rng, size=None):
        if self.mean == 0:
            return np.zeros(size, dtype=np.int64) if size is not None else 0
        return rng.generator.negative_binomial(self.dispersion, self.success_probability, size)

    def hit_probability(self, x):
        r = self.dispersion
        return -math.expm1(-r * math.log1p(self.mean * x / r))


@dataclass(frozen=True)
class FixedCount(CountDistribution):
    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise DomainError("fixed count must be a non-negative integer")

    @property
    def mean(self) -> float:
        return float(self.k)

    @property
    def variance(self) -> float:
        return 0.0

    def sample(self, rng, size=None):
        if size is None:
            return int(self.k)
        return np.full(size, int(self.k), dtype=np.int64)

    def hit_probability(self, x):
        if x >= 1:
            return 1.0 if self.k > 0 else 0.0
        return -math.expm1(self.k * math.log1p(-x))


def cluster_dispersion_c(beta: float, nu: float) -> float:
    """Second factorial moment of the cluster size over its squared mean.

    Returns ``(nu + beta**2 - beta) / beta**2`` for ``beta > 0`` and 0 when
    ``beta == 0``. Poisson clusters give 1, Bernoulli clusters give 0.
    """
    if beta < 0 or nu < 0:
        raise DomainError("cluster mean and variance must be non-negative")
    if beta == 0:
        return 0.0
    return (nu + beta * beta - beta) / (beta * beta)


def sample_offspring_count(dist: CountDistribution, rng: RandomStream, size=None):
    return dist.sample(rng, size)


# ---------------------------------------------------------------------------
# Displacement densities
# ---------------------------------------------------------------------------


class DisplacementDensity:
    dim: int

    @property
    def scale(self) -> float:
        """Length used by the edge-buffer rules."""
        raise NotImplementedError

    def sample(self, rng: RandomStream, n: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianDisplacement(DisplacementDensity):
    """Isotropic zero-mean normal with per-coordinate ``variance``."""

    variance: float
    dim: int = 2

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise DomainError("Gaussian displacement needs a positive finite variance")
        if self.dim < 1:
            raise DomainError("dimension must be positive")

    @classmethod
    def from_sd(cls, sigma: float, dim: int = 2) -> GaussianDisplacement:
        return cls(sigma * sigma, dim)

    @property
    def scale(self) -> float:
        return math.sqrt(self.variance)

    def sample(self, rng, n):
        return rng.generator.normal(0.0, self.scale, size=(int(n), self.dim))


@dataclass(frozen=True)
class UniformBallDisplacement(DisplacementDensity):
    """Uniform on the centred ball of the given radius."""

    radius: float
    dim: int = 2

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise DomainError("ball radius must be positive and finite")
        if self.dim < 1:
            raise DomainError("dimension must be positive")

    @property
    def scale(self) -> float:
        return self.radius

    def sample(self, rng, n):
        n = int(n)
        g = rng.generator
        z = g.normal(size=(n, self.dim))
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        u = g.random((n, 1)) ** (1.0 / self.dim)
        return self.radius * u * z / norms


def sample_displacement(f: DisplacementDensity, rng: RandomStream, n: int = 1) -> np.ndarray:
    return f.sample(rng, n)
