import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterchain import (BernoulliCount, ChainParams, DomainError, EquilibriumConfig, FixedCount,
                          GaussianDisplacement, NegativeBinomialCount, PoissonCount, PoissonNoise,
                          RandomStream, Window, family_load_bound, horizon, pooled_pcf,
                          simulate_equilibrium, simulate_families, simulate_family, step_generation)
from clusterchain.equilibrium import survival_probabilities
from clusterchain.noise import sample_poisson
from clusterchain.summaries import two_sample_envelope_test
from conftest import within_se

UNIT = Window.unit()


def case1_poisson(q=0.0):
    return ChainParams(PoissonCount(0.3), GaussianDisplacement.from_sd(0.1), 1.0, q, PoissonNoise(70.0))


# -- horizon ------------------------------------------------------------------------------

def test_horizon_examples():
    assert horizon(100.0, 0.0, 1e-3) == 0
    assert horizon(100.0, 0.5, 60.0) == 0
    assert horizon(100.0, 0.8, 2.22e-16) == 182
    assert horizon(100.0, 0.99, 2.22e-16) == brute_horizon(100.0, 0.99, 2.22e-16) == 4044


def brute_horizon(rho, s, eps):
    m = 0
    while rho * s ** (m + 1) > eps:
        m += 1
    return m


@settings(max_examples=200, deadline=None)
@given(rho=st.floats(1e-3, 1e4), s=st.floats(1e-3, 0.999), eps=st.floats(1e-15, 10.0))
def test_horizon_is_smallest_meeting_tolerance(rho, s, eps):
    n = horizon(rho, s, eps)
    assert rho * s ** (n + 1) <= eps
    if n > 0:
        assert rho * s ** n > eps


@settings(max_examples=100, deadline=None)
@given(s1=st.floats(0.01, 0.98), ds=st.floats(0.0, 0.01), e1=st.floats(1e-12, 1.0), k=st.floats(1.0, 100.0))
def test_horizon_monotone(s1, ds, e1, k):
    assert horizon(100.0, s1, e1 * k) <= horizon(100.0, s1, e1)
    assert horizon(100.0, s1, e1) <= horizon(100.0, s1 + ds, e1)


def test_horizon_errors():
    with pytest.raises(DomainError):
        horizon(100.0, 1.0, 1e-3)
    with pytest.raises(DomainError):
        horizon(100.0, 0.5, 0.0)


# -- configuration ------------------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(DomainError):
        EquilibriumConfig(ChainParams(PoissonCount(1.0), GaussianDisplacement(0.01)), UNIT)
    with pytest.raises(DomainError):
        EquilibriumConfig(ChainParams(PoissonCount(0.5), GaussianDisplacement(0.01)), UNIT)
    with pytest.raises(DomainError):
        EquilibriumConfig(case1_poisson(), UNIT, epsilon=0.0)
    cfg = EquilibriumConfig(case1_poisson(), UNIT)
    assert cfg.intensity == pytest.approx(100.0)
    assert cfg.horizon == 9
    assert cfg.window_at(4).lower[0] == pytest.approx(-0.8)


def test_survival_probabilities():
    # Bernoulli(b) offspring, no retention: a single line surviving m steps
    pr = ChainParams(BernoulliCount(0.3), GaussianDisplacement(0.01), 0.5, 0.0, PoissonNoise(1.0))
    assert np.allclose(survival_probabilities(pr, 5), 0.15 ** np.arange(6))
    # Monte Carlo check for a branching law
    pr = ChainParams(NegativeBinomialCount.from_c(0.9, 3.0), GaussianDisplacement(0.01), 0.8, 0.1,
                     PoissonNoise(1.0))
    surv = survival_probabilities(pr, 4)
    alive = [[len(simulate_family([0, 0], pr, RandomStream(1).split(i), 20).generation(m)) > 0
              for m in range(1, 5)] for i in range(4000)]
    alive = np.array(alive, dtype=float)
    for m in range(1, 5):
        assert within_se(alive[:, m - 1], surv[m])


# -- sampler ---------------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["thinned", "direct"])
def test_noise_only_equilibrium(method):
    pr = ChainParams(PoissonCount(0.0), GaussianDisplacement(0.01), 1.0, 0.0, PoissonNoise(70.0))
    cfg = EquilibriumConfig(pr, UNIT)
    assert cfg.horizon == 0
    n = [len(simulate_equilibrium(cfg, RandomStream(2).split(i), method=method)) for i in range(2000)]
    assert within_se(n, 70.0)
    assert np.var(n, ddof=1) == pytest.approx(70.0, rel=0.15)


def test_case1_intensity():
    cfg = EquilibriumConfig(case1_poisson(), UNIT)
    n = [len(simulate_equilibrium(cfg, RandomStream(3).split(i))) for i in range(500)]
    assert within_se(n, 100.0)


@pytest.mark.parametrize("params", [case1_poisson(q=0.2),
                                    ChainParams(NegativeBinomialCount.from_c(0.6, 5.0),
                                                GaussianDisplacement.from_sd(0.03), 0.9, 0.1,
                                                PoissonNoise(40.0))])
def test_thinned_matches_direct(params):
    cfg = EquilibriumConfig(params, UNIT)
    r = np.linspace(0.01, 0.25, 49)
    curves, counts = {}, {}
    for m in ("thinned", "direct"):
        pats = [simulate_equilibrium(cfg, RandomStream(4).split(m, i), method=m) for i in range(300)]
        counts[m] = [len(p) for p in pats]
        curves[m] = [pooled_pcf([p], 0.02, r).values for p in pats]
        assert within_se(counts[m], cfg.intensity)
    assert two_sample_envelope_test(curves["thinned"], curves["direct"], r, n_perm=499,
                                    rng=RandomStream(5)).inside


def test_methods_and_errors():
    cfg = EquilibriumConfig(case1_poisson(), UNIT)
    with pytest.raises(DomainError):
        simulate_equilibrium(cfg, RandomStream(1), method="exact")
    with pytest.raises(DomainError):
        simulate_equilibrium(cfg, RandomStream(1), n_steps=-1)
    a = simulate_equilibrium(cfg, RandomStream(6))
    b = simulate_equilibrium(cfg, RandomStream(6), workers=2)
    assert np.array_equal(a.points, b.points)
    assert UNIT.contains(a.points).all()


def test_one_step_keeps_equilibrium():
    # a step applied to an equilibrium pattern on a buffered window leaves
    # intensity and PCF unchanged on the unit square
    pr = case1_poisson()
    big = UNIT.dilate(0.4)
    cfg_big = EquilibriumConfig(pr, big)
    cfg = EquilibriumConfig(pr, UNIT)
    r = np.linspace(0.01, 0.25, 49)
    before, after, n_after = [], [], []
    for i in range(300):
        rng = RandomStream(7).split(i)
        stepped = step_generation(simulate_equilibrium(cfg_big, rng.split("eq")), pr, big,
                                  rng.split("step")).pattern.restrict(UNIT)
        n_after.append(len(stepped))
        after.append(pooled_pcf([stepped], 0.02, r).values)
        before.append(pooled_pcf([simulate_equilibrium(cfg, rng.split("fresh"))], 0.02, r).values)
    assert within_se(n_after, 100.0)
    assert two_sample_envelope_test(before, after, r, n_perm=499, rng=RandomStream(8)).inside


# -- families ---------------------------------------------------------------------------------

def test_family_load_bound_examples():
    assert family_load_bound(1.0, 100.0, 0.0) == 0.0
    assert family_load_bound(1.0, 100.0, 0.8) == pytest.approx(400.0)
    with pytest.raises(DomainError):
        family_load_bound(1.0, 100.0, 1.0)


def test_family_trivial_and_supercritical():
    pr = ChainParams(PoissonCount(0.0), GaussianDisplacement(0.01), 1.0, 0.0)
    fam = simulate_family([0.2, 0.3], pr, RandomStream(1))
    assert fam.extinction_generation == 1 and len(fam.generation(1)) == 0 and fam.size == 0
    assert len(fam.generation(7)) == 0
    with pytest.raises(DomainError):
        simulate_family([0, 0], ChainParams(FixedCount(1), GaussianDisplacement(0.01)), RandomStream(1))
    with pytest.raises(DomainError):
        fam.generation(0)


def test_family_truncation_reported():
    pr = ChainParams(PoissonCount(0.99), GaussianDisplacement(0.01), 1.0, 0.0)
    fams = [simulate_family([0, 0], pr, RandomStream(2).split(i), max_gen=2) for i in range(50)]
    trunc = [f for f in fams if f.truncated]
    assert trunc and all(f.extinction_generation is None for f in trunc)
    with pytest.raises(DomainError):
        trunc[0].generation(3)


def test_family_mean_size():
    pr = ChainParams(PoissonCount(0.6), GaussianDisplacement(0.01), 1.0, 0.2)
    sizes = [simulate_family([0, 0], pr, RandomStream(3).split(i)).size for i in range(5000)]
    assert within_se(sizes, 0.8 / 0.2)


def test_family_load_lemma():
    # ancestors drawn at the equilibrium intensity on a buffered region;
    # only the first moment matters for E(N)
    pr = ChainParams(PoissonCount(0.8), GaussianDisplacement.from_sd(0.1), 1.0, 0.0, PoissonNoise(20.0))
    region = UNIT.dilate(1.0)
    totals, lasts = [], []
    for i in range(200):
        rng = RandomStream(9).split(i)
        anc = sample_poisson(100.0, region, rng.split("ancestors")).points
        load = simulate_families(anc, pr, UNIT, rng.split("families"))
        assert not load.truncated
        assert load.last_time <= load.total
        totals.append(load.total)
        lasts.append(load.last_time)
    bound = family_load_bound(UNIT.volume, 100.0, pr.growth)
    assert within_se(totals, bound)
    assert np.mean(lasts) <= bound


def test_single_family_last_visit_can_exceed_its_count():
    # the inequality holds for the union of families, not family by family
    pr = ChainParams(PoissonCount(0.8), GaussianDisplacement.from_sd(0.1), 1.0, 0.0)
    anc = sample_poisson(100.0, UNIT.dilate(1.0), RandomStream(10)).points
    load = simulate_families(anc, pr, UNIT, RandomStream(11))
    assert np.any(load.last_visit > load.counts)
