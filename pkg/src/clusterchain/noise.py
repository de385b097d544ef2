"""Stationary noise processes: Poisson, Gaussian-kernel weighted DPP and
weighted permanental.

Both non-Poisson models use the kernel ``C(x) = (rho/alpha) exp(-||x/tau||^2)``
so that ``g - 1 = -/+ exp(-2||x/tau||^2) / alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft
from scipy.interpolate import RegularGridInterpolator

from .core import (ConfigError, DomainError, ExistenceError, PointPattern, RandomStream,
                   Window, as_stream)

DPP_MASS_TOL = 1e-6
MAX_GRID_STEP_RATIO = 0.2      # grid step may not exceed tau / 5
DEFAULT_GRID_STEP_RATIO = 0.125
EMBED_PAD_SCALES = 8.0


@dataclass(frozen=True)
class PoissonNoise:
    intensity: float

    def __post_init__(self):
        if self.intensity < 0:
            raise DomainError("intensity must be non-negative")


@dataclass(frozen=True)
class GaussianDPP:
    """alpha-weighted determinantal process with a Gaussian kernel.

    Exists iff ``(rho/alpha) (sqrt(pi) tau)^d <= 1``; alpha must be a
    positive integer.
    """

    intensity: float
    scale: float
    alpha: int = 1

    def __post_init__(self):
        if self.intensity < 0 or not self.scale > 0:
            raise DomainError("need intensity >= 0 and scale > 0")
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise DomainError("alpha must be a positive integer for a determinantal process")

    @staticmethod
    def max_scale(intensity: float, alpha: int = 1, dim: int = 2) -> float:
        """Largest admissible ``tau`` (the most repulsive member)."""
        return (alpha / intensity) ** (1 / dim) / math.sqrt(math.pi)

    def existence_ratio(self, dim: int = 2) -> float:
        return self.intensity / self.alpha * (math.sqrt(math.pi) * self.scale) ** dim

    def check_exists(self, dim: int = 2):
        ratio = self.existence_ratio(dim)
        if ratio > 1 + 1e-12:
            raise ExistenceError(
                f"Gaussian DPP with rho={self.intensity}, tau={self.scale}, alpha={self.alpha} "
                f"does not exist in dimension {dim}: (rho/alpha)(sqrt(pi) tau)^d = {ratio:.6g} > 1")


@dataclass(frozen=True)
class WeightedPermanental:
    """alpha-weighted permanental process (a Cox process for half-integer alpha).

    The driving intensity is a sum of ``2 alpha`` squared IID Gaussian fields.
    ``grid_step`` defaults to ``tau/8`` and may not exceed ``tau/5``.
    """

    intensity: float
    scale: float
    alpha: float = 0.5
    grid_step: float | None = None

    def __post_init__(self):
        if self.intensity < 0 or not self.scale > 0:
            raise DomainError("need intensity >= 0 and scale > 0")
        k = 2 * self.alpha
        if k < 1 or abs(k - round(k)) > 1e-12:
            raise DomainError("alpha must be a positive half-integer")
        if self.grid_step is not None and self.grid_step > MAX_GRID_STEP_RATIO * self.scale * (1 + 1e-12):
            raise ConfigError(
                f"grid_step {self.grid_step} exceeds tau/5 = {MAX_GRID_STEP_RATIO * self.scale}")

    @property
    def n_fields(self) -> int:
        return int(round(2 * self.alpha))

    @property
    def step(self) -> float:
        return self.grid_step if self.grid_step is not None else DEFAULT_GRID_STEP_RATIO * self.scale


NoiseSpec = PoissonNoise | GaussianDPP | WeightedPermanental


def noise_intensity(spec) -> float:
    return 0.0 if spec is None else float(spec.intensity)


def thinned_noise(spec, keep: float):
    """Law of the noise after independent thinning with retention ``keep``.

    Each family is closed under thinning: a thinned Poisson process is
    Poisson, a thinned DPP has kernel ``keep * C`` and a thinned Cox process
    is driven by ``keep * Lambda``. Only the intensity changes.
    """
    if not 0 <= keep <= 1:
        raise DomainError("retention probability must lie in [0, 1]")
    if spec is None:
        return None
    return replace(spec, intensity=spec.intensity * keep)


# ---------------------------------------------------------------------------
# PCF coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcfCoefficient:
    """``g - 1 = b * h*h~`` with ``h ~ N_d(variance)``; ``variance`` is None for Poisson."""

    b: float
    variance: float | None
    dim: int = 2

    def kernel(self):
        from .theory import MixtureKernel

        if self.b == 0:
            return MixtureKernel.zero(self.dim)
        return MixtureKernel.gaussian(self.b, 2 * self.variance, self.dim)


def pcf_coefficient(spec, dim: int = 2, convention: str = "exact") -> PcfCoefficient:
    """Coefficient ``b`` and factor variance for a noise specification.

    ``convention="exact"`` gives ``b = -/+ (pi tau^2 / 2)^(d/2) / alpha``, for
    which ``g(0) - 1 = -/+ 1/alpha`` as for the kernel above.
    ``convention="paper"`` reproduces the literature constants
    ``b = -/+ pi tau^2 / alpha`` (two dimensions only), which double the
    amplitude.
    """
    if spec is None or isinstance(spec, PoissonNoise):
        return PcfCoefficient(0.0, None, dim)
    if convention not in ("exact", "paper"):
        raise ConfigError(f"unknown convention {convention!r}")
    tau2 = spec.scale**2
    if convention == "exact":
        mag = (math.pi * tau2 / 2) ** (dim / 2) / spec.alpha
    else:
        if dim != 2:
            raise DomainError("the literature convention is only defined for d = 2")
        mag = math.pi * tau2 / spec.alpha
    sign = -1.0 if isinstance(spec, GaussianDPP) else 1.0
    return PcfCoefficient(sign * mag, tau2 / 8, dim)


def noise_pcf(spec, r, dim: int = 2):
    """Exact PCF ``g(r)`` of a noise specification."""
    r = np.asarray(r, dtype=float)
    if spec is None or isinstance(spec, PoissonNoise):
        return np.ones_like(r)
    sign = -1.0 if isinstance(spec, GaussianDPP) else 1.0
    return 1 + sign * np.exp(-2 * (r / spec.scale) ** 2) / spec.alpha


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def sample_poisson(intensity: float, window: Window, rng=None) -> PointPattern:
    rng = as_stream(rng)
    n = rng.poisson(intensity * window.volume)
    return PointPattern(window.uniform(int(n), rng), window)


def _dpp_modes(amp: float, scale: float, sides: np.ndarray, rng: RandomStream,
               mass_tol: float = DPP_MASS_TOL) -> np.ndarray:
    """Select integer torus modes ``k`` (frequency ``k/L``) by independent
    Bernoulli(lambda_k) draws."""
    d = len(sides)
    # modes with lambda < amp * 1e-17 are irrelevant at double precision
    radius = math.sqrt(math.log(1e17)) / (math.pi * scale)
    kmax = np.floor(radius * sides).astype(int)
    axes = [np.arange(-m, m + 1) for m in kmax]
    modes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    lam = amp * np.exp(-(math.pi * scale) ** 2 * np.sum((modes / sides) ** 2, axis=1))
    order = np.argsort(-lam, kind="stable")
    lam, modes = lam[order], modes[order]
    cum = np.cumsum(lam)
    keep = int(np.searchsorted(cum, (1 - mass_tol) * cum[-1])) + 1
    lam, modes = np.minimum(lam[:keep], 1.0), modes[:keep]
    chosen = rng.uniform(size=keep) < lam
    return modes[chosen]


class _FourierFeatures:
    """Normalised torus Fourier features ``exp(2 pi i k.(x - lo)/L)/sqrt|W|``,
    built from per-axis phase tables instead of a full complex exponential."""

    def __init__(self, modes: np.ndarray, window: Window):
        self.lo = window.lower
        self.sides = window.sides
        self.kmin = modes.min(axis=0)
        self.kspan = modes.max(axis=0) - self.kmin + 1
        self.idx = modes - self.kmin
        self.norm = 1.0 / math.sqrt(window.volume)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = None
        for a in range(x.shape[1]):
            ks = self.kmin[a] + np.arange(self.kspan[a])
            table = np.exp((2j * np.pi / self.sides[a]) * np.outer(ks, x[:, a] - self.lo[a]))
            part = table[self.idx[:, a]]
            out = part if out is None else out * part
        return out * self.norm


def _sample_projection(modes: np.ndarray, window: Window, rng: RandomStream) -> np.ndarray:
    """Exact sample from the projection DPP spanned by the given Fourier modes.

    Points are drawn sequentially by rejection from the uniform law on the
    window, the acceptance probability being the squared residual norm of
    the feature vector. Early steps keep an orthonormal basis of the
    chosen features; once half are chosen we switch to a basis of the
    complement, updated by Householder reflections.
    """
    n, d = modes.shape
    if n == 0:
        return np.empty((0, d))
    features = _FourierFeatures(modes, window)
    norm2 = n / window.volume
    pts = np.empty((n, d))
    Ec = np.empty((n, n), dtype=complex)  # rows: conjugated orthonormal chosen directions
    Uh = None                              # rows: conjugated orthonormal complement
    j = 0
    switch = max(1, n // 2)
    while j < n:
        # about one expected acceptance per batch; extra candidates are wasted work
        batch = int(min(4096, math.ceil(n / (n - j))))
        x = window.uniform(batch, rng)
        V = features(x)
        if Uh is None:
            C = Ec[:j] @ V
            resid = norm2 - np.einsum("ij,ij->j", C.real, C.real) - np.einsum("ij,ij->j", C.imag, C.imag)
        else:
            W = Uh @ V
            resid = np.einsum("ij,ij->j", W.real, W.real) + np.einsum("ij,ij->j", W.imag, W.imag)
        acc = np.flatnonzero(rng.uniform(size=batch) * norm2 < resid)
        if acc.size == 0:
            continue
        i = acc[0]
        pts[j] = x[i]
        v = V[:, i]
        if Uh is None:
            w = v - np.conj((Ec[:j] @ v).conj() @ Ec[:j])
            w = w - np.conj((Ec[:j] @ w).conj() @ Ec[:j])
            Ec[j] = w.conj() / np.linalg.norm(w)
            j += 1
            if j == switch and j < n:
                Q, _ = np.linalg.qr(Ec[:j].conj().T, mode="complete")
                Uh = np.ascontiguousarray(Q[:, j:].conj().T)
        else:
            Uh = _householder_drop(Uh, W[:, i])
            j += 1
    return pts


def _householder_drop(Uh: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Remove the direction with coordinates ``w`` from the row basis ``Uh``."""
    u = w / np.linalg.norm(w)
    phase = u[0] / abs(u[0]) if abs(u[0]) > 0 else 1.0
    v = u.copy()
    v[0] += phase
    v /= np.linalg.norm(v)
    # rows of H @ Uh with H = I - 2 v v^H; the first row is the dropped direction
    return Uh[1:] - 2.0 * np.outer(v[1:], v.conj() @ Uh)


def sample_gaussian_dpp(spec: GaussianDPP, window: Window, rng=None,
                        mass_tol: float = DPP_MASS_TOL) -> PointPattern:
    """Spectral sample of a Gaussian-kernel weighted DPP on the periodically
    extended window. ``alpha > 1`` superposes ``alpha`` independent DPPs
    of intensity ``rho/alpha``."""
    rng = as_stream(rng)
    d = window.dim
    spec.check_exists(d)
    parts = []
    for m in range(int(spec.alpha)):
        sub = rng.split("component", m)
        amp = spec.intensity / spec.alpha * (math.sqrt(math.pi) * spec.scale) ** d
        modes = _dpp_modes(amp, spec.scale, window.sides, sub.split("modes"), mass_tol)
        parts.append(_sample_projection(modes, window, sub.split("points")))
    pts = np.concatenate(parts, axis=0) if parts else np.empty((0, d))
    return PointPattern(pts, window)


def gaussian_fields_on_grid(window: Window, scale: float, variance: float, step: float,
                            n_fields: int, rng=None):
    """IID stationary Gaussian fields with covariance ``variance exp(-||x/scale||^2)``.

    Circulant embedding on a torus padded by ``8 scale`` per axis; small
    negative eigenvalues of the embedding are clipped to zero. Returns the
    grid axes and an array of shape ``(n_fields, *grid_shape)``.
    """
    rng = as_stream(rng)
    sides = window.sides
    counts = np.ceil(sides / step - 1e-9).astype(int) + 1
    pad = int(math.ceil(EMBED_PAD_SCALES * scale / step))
    shape = tuple(scipy.fft.next_fast_len(int(c + pad)) for c in counts)
    lags = []
    for m in shape:
        idx = np.arange(m)
        lags.append(np.minimum(idx, m - idx) * step)
    dist2 = sum(np.meshgrid(*[l**2 for l in lags], indexing="ij", sparse=True))
    cov = variance * np.exp(-dist2 / scale**2)
    eig = np.clip(scipy.fft.fftn(cov).real, 0.0, None)
    amp = np.sqrt(eig / eig.size)
    sub = tuple(slice(0, c) for c in counts)
    fields = []
    for i in range((n_fields + 1) // 2):
        g = rng.split("field", i).generator
        xi = g.standard_normal(shape) + 1j * g.standard_normal(shape)
        z = scipy.fft.fftn(amp * xi)
        fields.append(z.real[sub])
        fields.append(z.imag[sub])
    axes = [window.lower[k] + step * np.arange(counts[k]) for k in range(window.dim)]
    return axes, np.stack(fields[:n_fields])


def sample_weighted_permanental(spec: WeightedPermanental, window: Window, rng=None) -> PointPattern:
    """Cox process driven by ``sum_k Phi_k^2``, thinned from a dominating Poisson process."""
    rng = as_stream(rng)
    k = spec.n_fields
    axes, fields = gaussian_fields_on_grid(window, spec.scale, spec.intensity / k, spec.step, k,
                                           rng.split("fields"))
    lam = np.sum(fields**2, axis=0)
    lam_max = float(lam.max())
    if lam_max <= 0:
        return PointPattern.empty(window)
    cand = sample_poisson(lam_max, window, rng.split("candidates"))
    if len(cand) == 0:
        return cand
    interp = RegularGridInterpolator(axes, lam, method="linear", bounds_error=False, fill_value=None)
    keep = rng.split("thin").uniform(size=len(cand)) * lam_max < interp(cand.points)
    return PointPattern(cand.points[keep], window)


def sample_noise(spec, window: Window, rng=None) -> PointPattern:
    """Draw one realisation of a noise specification (``None`` means no noise)."""
    if spec is None or spec.intensity == 0:
        return PointPattern.empty(window)
    if isinstance(spec, PoissonNoise):
        return sample_poisson(spec.intensity, window, rng)
    if isinstance(spec, GaussianDPP):
        return sample_gaussian_dpp(spec, window, rng)
    if isinstance(spec, WeightedPermanental):
        return sample_weighted_permanental(spec, window, rng)
    raise ConfigError(f"unknown noise specification {spec!r}")
