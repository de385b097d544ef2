import math

import numpy as np
import pytest

from clusterchain import (ConfigError, DomainError, ExistenceError, GaussianDPP, PoissonNoise,
                          RandomStream, Window, WeightedPermanental, pcf_coefficient, pooled_pcf,
                          sample_gaussian_dpp, sample_noise, sample_poisson, sample_weighted_permanental)
from clusterchain.noise import gaussian_fields_on_grid, noise_pcf, thinned_noise
from clusterchain.summaries import bootstrap_pooled_test, smoothed_pcf
from conftest import variance_within_se, within_se

UNIT = Window.unit()
R = np.linspace(0.0, 0.3, 121)


# -- coefficients ----------------------------------------------------------------

def test_poisson_coefficient():
    c = pcf_coefficient(PoissonNoise(70))
    assert c.b == 0 and c.kernel().is_zero


@pytest.mark.parametrize("spec, g0", [(GaussianDPP(70, 0.05), -1.0), (GaussianDPP(30, 0.05, 2), -0.5),
                                      (WeightedPermanental(100, 0.1, 0.5), 2.0),
                                      (WeightedPermanental(100, 0.1, 1.5), 2 / 3)])
def test_coefficient_reproduces_kernel_pcf(spec, g0):
    k = pcf_coefficient(spec).kernel()
    assert k(0.0) == pytest.approx(g0, rel=1e-12)
    assert np.allclose(1 + k(R), noise_pcf(spec, R), rtol=0, atol=1e-12)
    assert (pcf_coefficient(spec).b < 0) == isinstance(spec, GaussianDPP)


def test_coefficient_three_dimensions():
    spec = WeightedPermanental(50, 0.2, 0.5)
    k = pcf_coefficient(spec, dim=3).kernel()
    assert k(0.0) == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(DomainError):
        pcf_coefficient(spec, dim=3, convention="paper")


def test_paper_convention_doubles_amplitude():
    spec = GaussianDPP(70, 1 / math.sqrt(70 * math.pi))
    assert pcf_coefficient(spec, convention="paper").b == pytest.approx(2 * pcf_coefficient(spec).b)
    assert pcf_coefficient(WeightedPermanental(70, 1.0), convention="paper").b == pytest.approx(2 * math.pi)
    with pytest.raises(ConfigError):
        pcf_coefficient(spec, convention="other")


def test_matched_ordering():
    tau = 0.05
    g_det = noise_pcf(GaussianDPP(100, tau), R)
    g_per = noise_pcf(WeightedPermanental(100, tau), R)
    assert np.all(g_det <= 1) and np.all(g_per >= 1)


# -- Poisson ----------------------------------------------------------------------

def test_poisson_empty_and_counts():
    assert len(sample_poisson(0.0, UNIT, RandomStream(1))) == 0
    n = [len(sample_poisson(100.0, UNIT, RandomStream(2).split(i))) for i in range(10_000)]
    assert within_se(n, 100.0)
    assert variance_within_se(n, 100.0)


def test_poisson_points_uniform():
    p = sample_poisson(5000.0, Window((0, 0), (2, 1)), RandomStream(3))
    assert Window((0, 0), (2, 1)).contains(p.points).all()
    assert within_se(p.points[:, 0], 1.0) and within_se(p.points[:, 1], 0.5)


# -- Gaussian DPP --------------------------------------------------------------------

def test_dpp_existence():
    rho = 70.0
    with pytest.raises(ExistenceError):
        sample_gaussian_dpp(GaussianDPP(rho, 2 / math.sqrt(rho * math.pi)), UNIT, RandomStream(1))
    assert GaussianDPP.max_scale(rho) == pytest.approx(1 / math.sqrt(rho * math.pi))
    GaussianDPP(rho, GaussianDPP.max_scale(rho)).check_exists()
    with pytest.raises(DomainError):
        GaussianDPP(rho, 0.05, alpha=1.5)


def _pcf_check(spec, reps, seed, r):
    pats = [sample_noise(spec, UNIT, RandomStream(seed).split(i)) for i in range(reps)]
    counts = [len(p) for p in pats]
    bw = 0.15 / math.sqrt(spec.intensity)
    curve, parts, h = pooled_pcf(pats, bw, r, return_parts=True)
    theory = smoothed_pcf(lambda s: noise_pcf(spec, s), r, h)
    env = bootstrap_pooled_test(theory, parts, r, n_boot=499, rng=RandomStream(seed).split("boot"))
    return counts, curve, env


def test_dpp_most_repulsive_statistics():
    spec = GaussianDPP(70.0, 1 / math.sqrt(70 * math.pi))
    r = np.linspace(0.0, 0.2, 81)
    counts, curve, env = _pcf_check(spec, 1000, 11, r)
    assert within_se(counts, 70.0)
    assert env.inside, env.p_value
    assert np.nanmax(curve.values[(r > 0) & (r <= 0.01)]) < 0.2


def test_dpp_superposition_alpha_two():
    spec = GaussianDPP(60.0, 0.05, alpha=2)
    r = np.linspace(0.0, 0.2, 81)
    counts, curve, env = _pcf_check(spec, 500, 12, r)
    assert within_se(counts, 60.0)
    assert env.inside, env.p_value


def test_dpp_deterministic():
    spec = GaussianDPP(50.0, 0.05)
    a = sample_gaussian_dpp(spec, UNIT, RandomStream(4))
    b = sample_gaussian_dpp(spec, UNIT, RandomStream(4))
    assert np.array_equal(a.points, b.points)


# -- weighted permanental ---------------------------------------------------------------

def test_permanental_field_count_and_grid_rule():
    assert WeightedPermanental(100, 0.1, 0.5).n_fields == 1
    assert WeightedPermanental(100, 0.1, 2.0).n_fields == 4
    with pytest.raises(ConfigError):
        WeightedPermanental(100, 0.1, 0.5, grid_step=0.03)
    with pytest.raises(DomainError):
        WeightedPermanental(100, 0.1, 0.7)


def test_gaussian_field_covariance():
    # empirical covariance at a few lags from many independent fields
    axes, f = gaussian_fields_on_grid(Window.unit(), 0.1, 2.0, 0.0125, 400, RandomStream(5))
    assert f.shape == (400, len(axes[0]), len(axes[1]))
    for lag in (0, 4, 8, 16):
        prod = f[:, : -lag or None, :] * f[:, lag:, :]
        expected = 2.0 * math.exp(-((lag * 0.0125) / 0.1) ** 2)
        assert prod.mean() == pytest.approx(expected, abs=0.06)


def test_permanental_statistics():
    spec = WeightedPermanental(100.0, 0.1, 0.5)
    r = np.linspace(0.0, 0.25, 101)
    counts, curve, env = _pcf_check(spec, 1000, 13, r)
    assert within_se(counts, 100.0)
    assert env.inside, env.p_value


def test_permanental_zero_intensity():
    assert len(sample_weighted_permanental(WeightedPermanental(0.0, 0.1), UNIT, RandomStream(1))) == 0


# -- thinning closure ----------------------------------------------------------------------

@pytest.mark.parametrize("spec", [PoissonNoise(80.0), GaussianDPP(80.0, 1 / math.sqrt(80 * math.pi)),
                                  WeightedPermanental(80.0, 0.1)])
def test_thinned_noise_matches_thinning(spec):
    keep = 0.4
    assert thinned_noise(spec, keep).intensity == pytest.approx(32.0)
    reps = 600
    direct, closed = [], []
    for i in range(reps):
        rng = RandomStream(21).split(i)
        p = sample_noise(spec, UNIT, rng.split("a"))
        direct.append(int(np.sum(rng.split("u").uniform(size=len(p)) < keep)))
        closed.append(len(sample_noise(thinned_noise(spec, keep), UNIT, rng.split("b"))))
    direct, closed = np.array(direct), np.array(closed)
    se = math.sqrt(direct.var(ddof=1) / reps + closed.var(ddof=1) / reps)
    assert abs(direct.mean() - closed.mean()) < 3 * se
    # count variances agree within sampling error (ratio of variances)
    ratio = direct.var(ddof=1) / closed.var(ddof=1)
    assert 0.75 < ratio < 1.33
    assert thinned_noise(None, keep) is None
    with pytest.raises(DomainError):
        thinned_noise(spec, 1.5)
