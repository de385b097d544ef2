import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterchain import (ChainParams, DomainError, FixedCount, GaussianDisplacement, PointPattern,
                          PoissonCount, PoissonNoise, RandomStream, UniformBallDisplacement, Window,
                          empirical_pcf, intensity_after_n, simulate_chain, step_generation)
from clusterchain.chain import simulation_windows
from clusterchain.core import DisplacementDensity
from clusterchain.noise import sample_poisson
from clusterchain.summaries import two_sample_envelope_test
from conftest import within_se

UNIT = Window.unit()


def fig2_params(**kw):
    base = dict(count=PoissonCount(10.0), displacement=GaussianDisplacement.from_sd(0.01), p=1.0, q=0.0)
    base.update(kw)
    return ChainParams(**base)


@dataclass(frozen=True)
class Shift(DisplacementDensity):
    """A displacement with no dilation rule."""

    dim: int = 2

    def sample(self, rng, n):
        return np.full((int(n), self.dim), 0.01)


# -- parameters ------------------------------------------------------------------------

def test_params_domain():
    with pytest.raises(DomainError):
        fig2_params(p=1.2)
    with pytest.raises(DomainError):
        fig2_params(q=-0.1)
    pr = fig2_params(p=0.5, q=0.2, noise=PoissonNoise(7.0))
    assert pr.growth == pytest.approx(5.2) and pr.rho_z == 7.0 and pr.beta == 10.0


# -- one generation ----------------------------------------------------------------------

def test_empty_input_no_noise():
    tr = step_generation(PointPattern.empty(UNIT), fig2_params(), UNIT, RandomStream(1))
    assert len(tr) == 0 and len(tr.pattern) == 0


def test_all_thinned_all_retained_is_identity():
    prev = sample_poisson(100.0, UNIT, RandomStream(2))
    tr = step_generation(prev, fig2_params(p=0.0, q=1.0), UNIT, RandomStream(3))
    assert np.array_equal(tr.pattern.points, prev.points)
    assert len(tr.offspring) == 0 and len(tr.noise) == 0


def test_provenance_partition():
    prev = sample_poisson(50.0, UNIT, RandomStream(4))
    pr = ChainParams(PoissonCount(2.0), GaussianDisplacement.from_sd(0.02), 0.6, 0.3, PoissonNoise(40.0))
    tr = step_generation(prev, pr, UNIT.dilate(0.1), RandomStream(5))
    assert len(tr.pattern) == len(tr.offspring) + len(tr.retained) + len(tr.noise)
    # retained points are a subset of the parents
    parents = {tuple(x) for x in prev.points}
    assert all(tuple(x) in parents for x in tr.retained.points)


def test_dimension_mismatch():
    prev = PointPattern(np.zeros((1, 3)), Window.unit(3))
    with pytest.raises(DomainError):
        step_generation(prev, fig2_params(), UNIT, RandomStream(1))


def test_mean_count_one_generation():
    # Poisson(100) parents, ten Poisson offspring each: 1000 points per unit area
    counts = []
    for i in range(1000):
        rng = RandomStream(6).split(i)
        prev = sample_poisson(100.0, UNIT, rng.split("initial"))
        counts.append(len(step_generation(prev, fig2_params(), UNIT, rng.split("step")).pattern))
    assert within_se(counts, 1000.0)


def test_fig2_chain_intensity():
    counts = []
    for i in range(1000):
        rng = RandomStream(7).split(i)
        wins = simulation_windows(UNIT, [fig2_params()], 4.0)
        prev = sample_poisson(100.0, wins[0], rng.split("initial"))
        counts.append(len(simulate_chain(prev, fig2_params(), 1, UNIT, rng=rng.split("chain"))[0]))
    assert within_se(counts, intensity_after_n(100.0, [(10, 1, 0, 0)]))


def test_noise_only_chain():
    pr = ChainParams(PoissonCount(0.0), GaussianDisplacement.from_sd(0.05), 1.0, 0.0, PoissonNoise(60.0))
    start = sample_poisson(500.0, UNIT, RandomStream(8))
    per_gen = [[] for _ in range(3)]
    for i in range(400):
        traces = simulate_chain(start, pr, 3, UNIT, rng=RandomStream(9).split(i))
        for g, tr in enumerate(traces):
            assert len(tr.offspring) == 0 and len(tr.retained) == 0
            per_gen[g].append(len(tr))
    for c in per_gen:
        assert within_se(c, 60.0)


def test_thinning_keeps_pcf():
    # same seed with and without thinning: the thinned offspring are a subset
    # of the unthinned ones, and their PCFs agree
    r = np.linspace(0.005, 0.06, 45)
    full, thin = [], []
    for i in range(150):
        rng = RandomStream(10).split(i)
        prev = sample_poisson(30.0, UNIT.dilate(0.05), rng.split("initial"))
        base = fig2_params(displacement=GaussianDisplacement.from_sd(0.02))
        a = step_generation(prev, base, UNIT, rng.split("step")).offspring.restrict(UNIT)
        b = step_generation(prev, fig2_params(displacement=base.displacement, p=0.5), UNIT,
                            rng.split("step")).offspring.restrict(UNIT)
        assert {tuple(x) for x in b.points} <= {tuple(x) for x in a.points}
        full.append(empirical_pcf(a, r_grid=r, bandwidth=0.006).values)
        thin.append(empirical_pcf(b, r_grid=r, bandwidth=0.006).values)
    assert two_sample_envelope_test(full, thin, r, n_perm=499, rng=RandomStream(11)).inside


# -- multi-generation runs -------------------------------------------------------------------

def test_single_generation_reduces_to_step():
    pr = ChainParams(PoissonCount(3.0), GaussianDisplacement.from_sd(0.02), 0.7, 0.2, PoissonNoise(30.0))
    init = sample_poisson(80.0, UNIT.dilate(0.08), RandomStream(12))
    rng = RandomStream(13)
    tr = simulate_chain(init, pr, 1, UNIT, 4.0, rng)[0]
    win = simulation_windows(UNIT, [pr], 4.0)
    direct = step_generation(init.restrict(win[0]), pr, win[1], rng.split("generation", 1))
    assert np.array_equal(tr.pattern.points, direct.restrict(UNIT).pattern.points)


def test_simulation_windows_dilation():
    pr = fig2_params(displacement=GaussianDisplacement.from_sd(0.02))
    wins = simulation_windows(UNIT, [pr] * 4, 4.0)
    for i, w in enumerate(wins):
        assert w.lower[0] == pytest.approx(-4 * math.sqrt(4 - i) * 0.02)
    ball = simulation_windows(UNIT, [fig2_params(displacement=UniformBallDisplacement(0.03))] * 2, 2.0)
    assert ball[0].upper[0] == pytest.approx(1 + 2 * math.sqrt(2) * 0.03)


def test_buffer_rule_errors():
    pr = fig2_params(displacement=Shift())
    init = PointPattern(np.array([[0.5, 0.5]]), UNIT)
    with pytest.raises(DomainError):
        simulate_chain(init, pr, 2, UNIT, 4.0, RandomStream(1))
    assert len(simulate_chain(init, pr, 1, UNIT, 0.0, RandomStream(1))) == 1
    with pytest.raises(DomainError):
        simulate_chain(init, fig2_params(), 0, UNIT)
    with pytest.raises(DomainError):
        simulate_chain(init, fig2_params(), 2, UNIT, -1.0)
    with pytest.raises(DomainError):
        simulate_chain(init, [fig2_params()], 2, UNIT)


def test_clipping():
    init = sample_poisson(100.0, UNIT.dilate(0.1), RandomStream(14))
    traces = simulate_chain(init, fig2_params(), 2, UNIT, rng=RandomStream(15))
    assert all(UNIT.contains(t.pattern.points).all() for t in traces)
    raw = simulate_chain(init, fig2_params(), 2, UNIT, rng=RandomStream(15), clip=False)
    assert len(raw[0]) >= len(traces[0])


def test_per_generation_parameters():
    plist = [fig2_params(count=PoissonCount(2.0)), fig2_params(count=FixedCount(1), q=0.0)]
    init = sample_poisson(100.0, UNIT, RandomStream(16))
    traces = simulate_chain(init, plist, 2, UNIT.dilate(5.0), 0.0, RandomStream(17))
    # a fixed single offspring preserves the count exactly
    assert len(traces[1]) == len(traces[0])


def test_deterministic_across_workers():
    pr = ChainParams(PoissonCount(3.0), GaussianDisplacement.from_sd(0.01), 0.8, 0.1, PoissonNoise(500.0))
    init = sample_poisson(3000.0, UNIT, RandomStream(18))  # several parent blocks
    a = simulate_chain(init, pr, 2, UNIT, rng=RandomStream(19), workers=1)
    b = simulate_chain(init, pr, 2, UNIT, rng=RandomStream(19), workers=3)
    c = simulate_chain(init, pr, 2, UNIT, rng=RandomStream(20), workers=1)
    for ta, tb in zip(a, b):
        for part in ("offspring", "retained", "noise"):
            assert np.array_equal(getattr(ta, part).points, getattr(tb, part).points)
    assert not np.array_equal(a[-1].pattern.points, c[-1].pattern.points)


# -- intensity recursion ---------------------------------------------------------------------

def test_intensity_examples():
    assert intensity_after_n(100.0, [(10, 1, 0, 0)]) == pytest.approx(1000.0)
    assert intensity_after_n(100.0, [(0.5, 1, 0.3, 10)]) == pytest.approx(90.0)
    assert intensity_after_n(100.0, [(0.8, 1, 0, 20)] * 57) == pytest.approx(100.0, rel=1e-12)
    assert intensity_after_n(5.0, []) == 5.0
    with pytest.raises(DomainError):
        intensity_after_n(0.0, [(1, 1, 0, 0)])
    with pytest.raises(DomainError):
        intensity_after_n(1.0, [(1, -1, 0, 0)])


@settings(max_examples=100, deadline=None)
@given(rho=st.floats(0.1, 1e3), s=st.floats(0.0, 0.99), q=st.floats(0.0, 1.0), n=st.integers(1, 40))
def test_stationary_intensity_is_constant(rho, s, q, n):
    q = min(q, s)
    beta_p = s - q
    gen = (beta_p, 1.0, q, rho * (1 - s))
    assert intensity_after_n(rho, [gen] * n) == pytest.approx(rho, rel=1e-12)
