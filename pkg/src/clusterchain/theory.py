"""Closed-form intensities and pair correlation functions.

Every reduced PCF ``g - 1`` handled here is a finite mixture

    constant + dirac * delta_0 + sum_j w_j * N_d(s_j^2)

where ``N_d(s^2)`` is the density of d IID zero-mean normals with variance
``s^2``. The family is closed under convolution (variances add), which is
all that is needed to iterate the chain's PCF across generations when the
offspring, initial and noise densities are isotropic Gaussians.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import DomainError, cluster_dispersion_c

PRUNE_TOL = 1e-14
LIMIT_TOL = 1e-10


class PcfEvaluationError(DomainError):
    """Evaluation at a point where the kernel carries an atom."""


class DivergenceError(DomainError):
    """The limiting PCF does not exist for these parameters."""


# ---------------------------------------------------------------------------
# Mixture kernels
# ---------------------------------------------------------------------------


def _merge(components: Iterable[tuple[float, float]], rel_tol: float = 1e-12):
    items = sorted((float(v), float(w)) for w, v in components if w != 0.0)
    merged: list[list[float]] = []
    for v, w in items:
        if merged and abs(v - merged[-1][0]) <= rel_tol * max(v, merged[-1][0]):
            merged[-1][1] += w
        else:
            merged.append([v, w])
    return tuple((w, v) for v, w in merged if w != 0.0)


@dataclass(frozen=True)
class MixtureKernel:
    """``constant + dirac*delta_0 + sum w * N_d(variance)`` on R^d.

    ``components`` holds ``(weight, variance)`` pairs with per-coordinate
    variances, kept sorted by variance with equal variances merged.
    """

    constant: float = 0.0
    dirac: float = 0.0
    components: tuple[tuple[float, float], ...] = ()
    dim: int = 2

    def __post_init__(self):
        for w, v in self.components:
            if not (v > 0 and math.isfinite(v)):
                raise DomainError(f"component variance must be positive, got {v}")
            if not math.isfinite(w):
                raise DomainError("component weights must be finite")
        object.__setattr__(self, "components", _merge(self.components))
        object.__setattr__(self, "constant", float(self.constant))
        object.__setattr__(self, "dirac", float(self.dirac))

    # constructors -----------------------------------------------------------

    @classmethod
    def zero(cls, dim: int = 2) -> MixtureKernel:
        return cls(dim=dim)

    @classmethod
    def delta(cls, weight: float = 1.0, dim: int = 2) -> MixtureKernel:
        return cls(dirac=weight, dim=dim)

    @classmethod
    def gaussian(cls, weight: float, variance: float, dim: int = 2) -> MixtureKernel:
        return cls(components=((weight, variance),), dim=dim)

    # algebra ----------------------------------------------------------------

    def __add__(self, other: MixtureKernel) -> MixtureKernel:
        if not isinstance(other, MixtureKernel):
            return NotImplemented
        _check_dims(self, other)
        return MixtureKernel(self.constant + other.constant, self.dirac + other.dirac,
                             self.components + other.components, self.dim)

    def __mul__(self, scalar: float) -> MixtureKernel:
        s = float(scalar)
        return MixtureKernel(s * self.constant, s * self.dirac,
                             tuple((s * w, v) for w, v in self.components), self.dim)

    __rmul__ = __mul__

    def __neg__(self) -> MixtureKernel:
        return self * -1.0

    def __sub__(self, other: MixtureKernel) -> MixtureKernel:
        return self + (-other)

    def convolve(self, other: MixtureKernel, prune_tol: float = PRUNE_TOL) -> MixtureKernel:
        return mixture_convolve(self, other, prune_tol)

    @property
    def total_weight(self) -> float:
        """Integral of the Gaussian part (the constant and atom excluded)."""
        return math.fsum(w for w, _ in self.components)

    @property
    def mass(self) -> float:
        """Integral of the integrable part, atom included."""
        return self.dirac + self.total_weight

    @property
    def abs_weight(self) -> float:
        return abs(self.dirac) + math.fsum(abs(w) for w, _ in self.components)

    @property
    def is_zero(self) -> bool:
        return self.constant == 0 and self.dirac == 0 and not self.components

    def pruned(self, tol: float = PRUNE_TOL) -> MixtureKernel:
        """Drop components lighter than ``tol`` times the total absolute weight."""
        cut = tol * self.abs_weight
        keep = tuple((w, v) for w, v in self.components if abs(w) >= cut)
        return MixtureKernel(self.constant, self.dirac, keep, self.dim)

    def __call__(self, r):
        return pcf_evaluate(self, r)

    # serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "constant": self.constant,
            "dirac": self.dirac,
            "components": [{"weight": w, "variance": v} for w, v in self.components],
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MixtureKernel:
        comps = tuple((float(c["weight"]), float(c["variance"])) for c in data.get("components", ()))
        return cls(float(data.get("constant", 0.0)), float(data.get("dirac", 0.0)),
                   comps, int(data.get("dim", 2)))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> MixtureKernel:
        return cls.from_dict(json.loads(text))


def _check_dims(a: MixtureKernel, b: MixtureKernel):
    if a.dim != b.dim:
        raise DomainError(f"dimension mismatch: {a.dim} vs {b.dim}")


def mixture_convolve(a: MixtureKernel, b: MixtureKernel, prune_tol: float = PRUNE_TOL) -> MixtureKernel:
    """Convolution of two mixture kernels.

    The atom acts as the identity, Gaussian variances add, and a constant
    convolved with an integrable part yields the constant times its mass.
    Two non-zero constants have no convolution and raise ``DomainError``.
    """
    _check_dims(a, b)
    if a.constant != 0 and b.constant != 0:
        raise DomainError("convolution of two non-zero constants is not integrable")
    constant = a.constant * b.mass + b.constant * a.mass
    comps = [(a.dirac * w, v) for w, v in b.components]
    comps += [(b.dirac * w, v) for w, v in a.components]
    comps += [(w1 * w2, v1 + v2) for w1, v1 in a.components for w2, v2 in b.components]
    out = MixtureKernel(constant, a.dirac * b.dirac, tuple(comps), a.dim)
    return out.pruned(prune_tol) if prune_tol else out


def pcf_evaluate(kernel: MixtureKernel, r):
    """Value of an isotropic mixture kernel at distance(s) ``r``.

    The atom is invisible for r > 0; asking for r = 0 while the atom is
    non-zero raises ``PcfEvaluationError``.
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise DomainError("distances must be non-negative")
    if kernel.dirac != 0 and np.any(r_arr == 0):
        raise PcfEvaluationError("kernel has an atom at the origin; value at r = 0 is undefined")
    out = np.full(r_arr.shape, kernel.constant, dtype=float)
    r2 = r_arr * r_arr
    half_d = kernel.dim / 2
    for w, v in kernel.components:
        out = out + w * (2 * math.pi * v) ** (-half_d) * np.exp(-r2 / (2 * v))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Per-generation models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationModel:
    """One generation's reproduction system with Gaussian offspring.

    ``sigma2`` is the per-coordinate offspring variance; ``noise`` is the
    reduced PCF of the noise process (``None`` for Poisson noise).
    """

    beta: float
    nu: float
    sigma2: float
    p: float = 1.0
    q: float = 0.0
    rho_z: float = 0.0
    noise: MixtureKernel | None = None

    def __post_init__(self):
        if self.beta < 0 or self.nu < 0:
            raise DomainError("cluster mean and variance must be non-negative")
        if not self.sigma2 > 0:
            raise DomainError("offspring variance must be positive")
        if not (0 <= self.p <= 1 and 0 <= self.q <= 1):
            raise DomainError("p and q must lie in [0, 1]")
        if self.rho_z < 0:
            raise DomainError("noise intensity must be non-negative")
        if self.noise is not None and self.noise.dirac != 0:
            raise DomainError("a reduced PCF cannot carry an atom at the origin")

    @property
    def c(self) -> float:
        return cluster_dispersion_c(self.beta, self.nu)

    @property
    def bp(self) -> float:
        return self.beta * self.p

    @property
    def growth(self) -> float:
        return self.beta * self.p + self.q

    def noise_kernel(self, dim: int) -> MixtureKernel:
        if self.noise is None:
            return MixtureKernel.zero(dim)
        if self.noise.dim != dim:
            raise DomainError("noise kernel dimension mismatch")
        return self.noise

    def thinned(self) -> GenerationModel:
        """Equivalent model with the thinning folded into the cluster law."""
        bp = self.beta * self.p
        nu = bp - self.beta * self.p**2 + self.nu * self.p**2
        return GenerationModel(bp, nu, self.sigma2, 1.0, self.q, self.rho_z, self.noise)


@dataclass(frozen=True)
class PcfModelConfig:
    """Initial intensity and reduced PCF plus a list of generation models.

    ``initial`` may be affine (a non-zero constant is allowed).
    """

    rho_g0: float
    initial: MixtureKernel
    generations: tuple[GenerationModel, ...]

    def __post_init__(self):
        if not self.rho_g0 > 0:
            raise DomainError("initial intensity must be positive")
        if self.initial.dirac != 0:
            raise DomainError("a reduced PCF cannot carry an atom at the origin")
        object.__setattr__(self, "generations", tuple(self.generations))
        for g in self.generations:
            if g.noise is not None and g.noise.dim != self.initial.dim:
                raise DomainError("noise kernel dimension mismatch")

    @classmethod
    def same_system(cls, rho_g0: float, initial: MixtureKernel, gen: GenerationModel,
                    n: int) -> PcfModelConfig:
        return cls(rho_g0, initial, (gen,) * n)

    @property
    def dim(self) -> int:
        return self.initial.dim

    def generation(self, i: int) -> GenerationModel:
        """Model of generation ``i`` (1-based)."""
        if i < 1 or i > len(self.generations):
            raise DomainError(f"configuration has no generation {i}")
        return self.generations[i - 1]

    def intensities(self, n: int) -> list[float]:
        rho = [float(self.rho_g0)]
        for i in range(1, n + 1):
            g = self.generation(i)
            rho.append(rho[-1] * g.growth + g.rho_z)
        return rho


def _pair_factor(g: GenerationModel, dim: int) -> MixtureKernel:
    """``(bp f + q delta) * (bp f~ + q delta)`` for Gaussian f."""
    bp, q = g.bp, g.q
    return MixtureKernel(0.0, q * q, ((bp * bp, 2 * g.sigma2), (2 * bp * q, g.sigma2)), dim)


def _cluster_bracket(g: GenerationModel, dim: int) -> MixtureKernel:
    """``c (bp)^2 f*f~ + bp q (f + f~)``."""
    bp = g.bp
    return MixtureKernel(0.0, 0.0, ((g.c * bp * bp, 2 * g.sigma2), (2 * bp * g.q, g.sigma2)), dim)


def pcf_generation_n(cfg: PcfModelConfig, n: int, prune_tol: float = PRUNE_TOL) -> MixtureKernel:
    """Reduced PCF of generation ``n`` assembled from the four term groups.

    Pairs with distinct founding ancestors in generation 0, pairs sharing an
    ancestor in some generation ``i - 1``, pairs rooted in distinct noise
    points of generation ``i`` and pairs of current noise points.
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    dim = cfg.dim
    rho = cfg.intensities(n)
    rho_n = rho[n]
    if not rho_n > 0:
        raise DomainError(f"generation {n} has zero intensity; its PCF is undefined")

    total = MixtureKernel.zero(dim)
    tail = MixtureKernel.delta(1.0, dim)  # product of pair factors j = i+1..n
    for i in range(n, 0, -1):
        g = cfg.generation(i)
        cluster = _cluster_bracket(g, dim) * (rho[i - 1] / rho_n**2)
        total = total + mixture_convolve(cluster, tail, prune_tol)
        if g.rho_z > 0:
            noise = g.noise_kernel(dim) * (g.rho_z / rho_n) ** 2
            total = total + mixture_convolve(noise, tail, prune_tol)
        tail = mixture_convolve(_pair_factor(g, dim), tail, prune_tol)
    initial = cfg.initial * (cfg.rho_g0 / rho_n) ** 2
    total = total + mixture_convolve(initial, tail, prune_tol)
    total = total.pruned(prune_tol)
    if total.dirac != 0:
        raise AssertionError("distinct-pair PCF acquired an atom at the origin")
    return total


def pcf_step(g_prev: MixtureKernel, rho_prev: float, gen: GenerationModel,
             prune_tol: float = PRUNE_TOL) -> MixtureKernel:
    """One-generation update of the reduced PCF.

    Written out term by term from the decomposition of ``G_n`` into thinned
    offspring, retained parents and noise, independently of
    :func:`pcf_generation_n`.
    """
    if not rho_prev > 0:
        raise DomainError("previous intensity must be positive")
    dim = g_prev.dim
    rho_n = rho_prev * gen.growth + gen.rho_z
    if not rho_n > 0:
        raise DomainError("next generation has zero intensity")
    bp, q = gen.bp, gen.q
    ff = MixtureKernel.gaussian(1.0, 2 * gen.sigma2, dim)      # f * f~
    f_sym = MixtureKernel.gaussian(2.0, gen.sigma2, dim)       # f + f~

    offspring = mixture_convolve(g_prev, ff, prune_tol) + ff * (gen.c / rho_prev)
    out = offspring * (rho_prev * bp / rho_n) ** 2
    out = out + g_prev * (rho_prev * q / rho_n) ** 2
    if gen.rho_z > 0:
        out = out + gen.noise_kernel(dim) * (gen.rho_z / rho_n) ** 2
    cross = mixture_convolve(g_prev, f_sym, prune_tol) + f_sym * (1.0 / rho_prev)
    out = out + cross * (rho_prev**2 * bp * q / rho_n**2)
    return out.pruned(prune_tol)


def iterate_pcf_step(cfg: PcfModelConfig, n: int, prune_tol: float = PRUNE_TOL) -> MixtureKernel:
    """n-fold application of :func:`pcf_step` from the initial kernel."""
    g = cfg.initial
    rho = float(cfg.rho_g0)
    for i in range(1, n + 1):
        gen = cfg.generation(i)
        g = pcf_step(g, rho, gen, prune_tol)
        rho = rho * gen.growth + gen.rho_z
    return g


# ---------------------------------------------------------------------------
# Same reproduction system: limits and the gamma index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SameSystem:
    """Time-homogeneous reproduction system with Gaussian offspring.

    ``b`` and ``noise_variance`` describe a noise PCF of the form
    ``b * h*h~`` with ``h ~ N_d(noise_variance)``; ``noise`` overrides them
    with an arbitrary mixture. ``rho_g`` is only needed when there is no
    noise (the invariant intensity is then arbitrary).
    """

    beta: float
    nu: float
    sigma2: float
    p: float = 1.0
    q: float = 0.0
    rho_z: float = 0.0
    b: float = 0.0
    noise_variance: float | None = None
    dim: int = 2
    rho_g: float | None = None
    noise: MixtureKernel | None = None

    def __post_init__(self):
        GenerationModel(self.beta, self.nu, self.sigma2, self.p, self.q, self.rho_z)
        if self.b != 0 and self.noise is None and not (self.noise_variance and self.noise_variance > 0):
            raise DomainError("a non-zero noise coefficient needs a positive noise variance")

    @property
    def bp(self) -> float:
        return self.beta * self.p

    @property
    def growth(self) -> float:
        return self.beta * self.p + self.q

    @property
    def c(self) -> float:
        return cluster_dispersion_c(self.beta, self.nu)

    @property
    def finite_cluster(self) -> bool:
        return self.growth < 1 and self.rho_z > 0

    @property
    def intensity(self) -> float:
        if self.finite_cluster:
            return self.rho_z / (1 - self.growth)
        if self.rho_g is None or not self.rho_g > 0:
            raise DomainError("without noise the invariant intensity must be given as rho_g")
        return float(self.rho_g)

    def noise_kernel(self) -> MixtureKernel:
        if self.noise is not None:
            return self.noise
        if self.b == 0:
            return MixtureKernel.zero(self.dim)
        return MixtureKernel.gaussian(self.b, 2 * self.noise_variance, self.dim)

    def generation_model(self) -> GenerationModel:
        return GenerationModel(self.beta, self.nu, self.sigma2, self.p, self.q, self.rho_z,
                               self.noise_kernel() if self.rho_z > 0 else None)


def _power_series_weight(k: int, bp: float, q: float) -> float:
    """Total weight on ``N(k sigma^2)`` in ``sum_i (bp f + q delta)^{*2i}``."""
    if bp == 0:
        return 1.0 / (1 - q * q) if k == 0 else 0.0
    a = (bp / (1 - q)) ** k / (1 - q)
    b = (bp / (1 + q)) ** k / (1 + q)
    return 0.5 * (a + (b if k % 2 == 0 else -b))


def _series_tail_bound(k_last: int, bp: float, q: float) -> float:
    """Upper bound on the summed weights with index above ``k_last``."""
    if bp == 0:
        return 0.0
    r1, r2 = bp / (1 - q), bp / (1 + q)
    t1 = r1 ** (k_last + 1) / (1 - r1) / (1 - q)
    t2 = r2 ** (k_last + 1) / (1 - r2) / (1 + q)
    return 0.5 * (t1 + t2)


def pcf_limit(system: SameSystem, tol: float = LIMIT_TOL):
    """Limiting reduced PCF of the chain under a same reproduction system.

    With ``beta p + q < 1`` and noise present the limit is a finite
    mixture, truncated once the discarded absolute weight drops below
    ``tol``. With ``beta p + q = 1`` and no noise the limit exists only for
    ``d >= 3``; an :class:`InfiniteClusterPcf` pointwise evaluator is
    returned. Any other combination raises.
    """
    s = system.growth
    if system.finite_cluster:
        return _finite_limit(system, tol)
    if abs(s - 1) <= 1e-12 and system.rho_z == 0:
        if system.dim <= 2:
            raise DivergenceError(
                "with beta*p + q = 1 and no noise the PCF diverges in dimension <= 2")
        return InfiniteClusterPcf(system)
    raise DomainError("need beta*p + q < 1 with noise, or beta*p + q = 1 without noise")


def _finite_limit(system: SameSystem, tol: float) -> MixtureKernel:
    dim = system.dim
    bp, q, s2 = system.bp, system.q, system.sigma2
    rho_g = system.intensity
    bracket = (MixtureKernel(0.0, 0.0, ((system.c * bp * bp, 2 * s2), (2 * bp * q, s2)), dim)
               * (1.0 / rho_g)
               + system.noise_kernel() * (system.rho_z / rho_g) ** 2)
    scale = bracket.abs_weight
    if bracket.constant != 0:
        raise DomainError("the noise PCF must be integrable for the limit to exist")
    comps = []
    k = 0
    while True:
        w = _power_series_weight(k, bp, q)
        comps.extend((w * cw, cv + k * s2) for cw, cv in bracket.components)
        if scale * _series_tail_bound(k, bp, q) < tol:
            break
        k += 1
        if k > 10**6:
            raise DivergenceError("series failed to reach the requested tolerance")
    return MixtureKernel(0.0, 0.0, tuple(comps), dim)


class InfiniteClusterPcf:
    """Pointwise limit ``g - 1`` when ``beta p + q = 1`` without noise (d >= 3).

    The mixture weights do not decay, so ``terms`` leading indices are
    summed exactly and the rest is approximated in closed form.
    """

    def __init__(self, system: SameSystem, terms: int = 400):
        if system.dim < 3:
            raise DivergenceError("divergent in dimension <= 2")
        self.system = system
        self.rho_g = system.intensity
        self.terms = int(terms)
        bp, q = system.bp, system.q
        # (weight, variance in units of sigma^2)
        self._bracket = ((system.c * bp * bp / self.rho_g, 2.0), (2 * bp * q / self.rho_g, 1.0))
        self._plateau = 0.5 / (1 - q) if q < 1 else 0.0

    def tail_bound(self, terms: int | None = None) -> float:
        """Bound, uniform in r, on the sum of the terms beyond ``terms``.

        The closed-form correction is applied on top of this remainder, so
        the actual error is far smaller.
        """
        n = self.terms if terms is None else int(terms)
        d, s2, q = self.system.dim, self.system.sigma2, self.system.q
        wmax = max(abs(cw) for cw, _ in self._bracket) / (1 - q if q < 1 else 1.0)
        x0 = n + 1.0
        return 2 * wmax * (2 * math.pi * s2) ** (-d / 2) * (
            x0 ** (-d / 2) + x0 ** (1 - d / 2) / (d / 2 - 1))

    def _density(self, r2, v):
        d = self.system.dim
        return (2 * math.pi * v) ** (-d / 2) * np.exp(-r2 / (2 * v))

    def _tail_integral(self, r2, v0):
        """``int_{v0}^inf N_d(v)(r) dv``."""
        from scipy.special import gamma, gammainc

        a = self.system.dim / 2 - 1
        out = np.empty_like(r2)
        zero = r2 == 0
        out[zero] = (2 * math.pi) ** (-self.system.dim / 2) * v0 ** (-a) / a
        rz = r2[~zero]
        out[~zero] = ((2 * math.pi) ** (-self.system.dim / 2) * (rz / 2) ** (-a)
                      * gamma(a) * gammainc(a, rz / (2 * v0)))
        return out

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        r2 = np.atleast_1d(r * r)
        s2 = self.system.sigma2
        bp, q = self.system.bp, self.system.q
        out = np.zeros_like(r2)
        n = self.terms
        for k in range(n + 1):
            wk = _power_series_weight(k, bp, q) if q < 1 else float(k == 0)
            for cw, m in self._bracket:
                out += cw * wk * self._density(r2, (m + k) * s2)
        # beyond ``terms`` each weight is the plateau plus an alternating part;
        # the first is summed as an integral with an endpoint correction and
        # the second as half its leading term
        k1 = n + 1
        alt = 0.5 * (-1) ** k1 * (bp / (1 + q)) ** k1 / (1 + q) if q < 1 else 0.0
        for cw, m in self._bracket:
            v_next = (m + k1) * s2
            lead = self._density(r2, v_next)
            tail = self._plateau * (self._tail_integral(r2, v_next) / s2 + 0.5 * lead)
            out += cw * (tail + 0.5 * alt * lead)
        out = out.reshape(r.shape)
        return out if out.ndim else float(out)


def gamma_index(beta: float, nu: float, p: float, q: float, rho_z: float, b: float) -> float:
    """Integral of the limiting reduced PCF.

    Positive values indicate clustering and negative ones regularity; the
    value does not depend on the offspring or noise densities.
    """
    s = beta * p + q
    if s >= 1:
        raise DomainError("gamma index needs beta*p + q < 1")
    if not rho_z > 0:
        raise DomainError("gamma index needs a positive noise intensity")
    c = cluster_dispersion_c(beta, nu)
    bp = beta * p
    return ((c * bp * bp + 2 * bp * q) / rho_z + b * (1 - s)) / (1 + s)
