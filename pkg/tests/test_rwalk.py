import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from bpire.env_model import EnvAtom, EnvironmentModel, LinearFractional, PointMass, Poisson, sample_atom_indices
from bpire.rwalk import (
    EdgeworthSpec,
    WalkStats,
    cramer_check,
    edgeworth_G3,
    g3_correction_bound,
    lam,
    minima_density_check,
    prospective_minima,
    walk_stats,
)

from oracles import minima_brute_force

M_STAR = EnvironmentModel(
    (
        EnvAtom(0.5, LinearFractional(0.3, 0.55), Poisson(0.4)),
        EnvAtom(0.5, Poisson(2.2), Poisson(0.4)),
    )
)


def two_point(m1, m2):
    return EnvironmentModel((EnvAtom(0.5, Poisson(m1), Poisson(1.0)), EnvAtom(0.5, Poisson(m2), Poisson(1.0))))


def test_lambda_at_zero():
    assert lam(M_STAR, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_lambda_lattice_resonance():
    model = two_point(2.0, 4.0)
    s = 0.7
    assert lam(model, s) == pytest.approx((2 ** (1j * s) + 4 ** (1j * s)) / 2, abs=1e-15)
    assert abs(lam(model, 2 * math.pi / math.log(2)) - 1) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-200, 200))
def test_lambda_modulus_and_conjugate_symmetry(s):
    v = lam(M_STAR, s)
    assert abs(v) <= 1 + 1e-15
    assert lam(M_STAR, -s) == pytest.approx(np.conj(v), abs=1e-15)


def test_walk_stats_degenerate():
    w = walk_stats(EnvironmentModel.single(Poisson(math.e**2), PointMass(0)))
    assert w.mu == pytest.approx(2.0) and w.sigma2 == pytest.approx(0.0, abs=1e-15)


def test_walk_stats_symmetric_two_point():
    w = walk_stats(two_point(math.e, math.e**3))
    assert (w.mu, w.sigma2, w.kappa3) == (pytest.approx(2.0), pytest.approx(1.0), pytest.approx(0.0, abs=1e-14))


def test_walk_stats_log_symmetric_mean_zero():
    assert walk_stats(two_point(2.0, 0.5)).mu == pytest.approx(0.0, abs=1e-15)


def test_walk_stats_against_monte_carlo():
    model = EnvironmentModel(
        (
            EnvAtom(0.2, Poisson(1.5), PointMass(0)),
            EnvAtom(0.5, Poisson(3.0), PointMass(0)),
            EnvAtom(0.3, LinearFractional(0.1, 0.7), PointMass(0)),
        )
    )
    w = walk_stats(model)
    x = model.log_means[sample_atom_indices(model, 1_000_000, np.random.default_rng(5))]
    c = x - x.mean()
    n = x.size
    assert abs(x.mean() - w.mu) <= 4 * x.std() / math.sqrt(n)
    assert abs(c.var() - w.sigma2) <= 4 * (c**2).std() / math.sqrt(n)
    assert abs((c**3).mean() - w.kappa3) <= 4 * (c**3).std() / math.sqrt(n)


def test_minima_examples():
    assert prospective_minima([0, 1, 2, 3]) == [0, 1, 2]
    assert prospective_minima([0, -1, 0.5, -0.2, 1, 2]) == [0, 1, 3, 4]
    assert prospective_minima([5.0]) == [0]
    assert prospective_minima([]) == []


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=200))
def test_minima_match_brute_force(steps):
    walk = np.cumsum([0] + steps[1:]).astype(float)
    assert prospective_minima(walk) == minima_brute_force(walk)


def test_minima_density_constant_positive_increment():
    model = EnvironmentModel.single(PointMass(3), Poisson(1.0))
    r = minima_density_check(model, a=10, eps_drift=0.5, n=50, R=50, seed=1, eps=0.9)
    assert r.probability == 0


def test_minima_density_eps_zero():
    r = minima_density_check(M_STAR, eps_drift=0.55, n=50, R=200, seed=1, eps=0.0)
    assert r.probability == 0


def test_minima_density_decreasing_in_n():
    from bpire.rwalk import truncated_log_means

    drift = 0.9 * float(M_STAR.weights @ truncated_log_means(M_STAR, 10))
    p = [minima_density_check(M_STAR, 10, drift, n, 2000, seed=3, eps_fraction=0.9).probability for n in (50, 100, 200)]
    assert p[0] > p[1] > p[2]


def test_minima_density_rejects_excess_drift():
    with pytest.raises(ValueError):
        minima_density_check(M_STAR, eps_drift=5.0, n=20, R=10, seed=1)


SYM = EdgeworthSpec(WalkStats(0.5, 1.0, 0.0, 0.0))
SKEW = EdgeworthSpec(WalkStats(0.5, 0.04, 0.003, 0.0), shift_b=-0.4)


def test_g3_without_correction_is_phi():
    x = np.linspace(-3, 3, 13)
    assert np.allclose(edgeworth_G3(x, 10, SYM), ndtr(x), atol=1e-15)
    assert edgeworth_G3(0.0, 10, SYM) == pytest.approx(0.5)


def test_g3_polynomial_root_at_unit_x():
    spec = EdgeworthSpec(WalkStats(0.5, 0.04, 0.003, 0.0))
    for x in (-1.0, 1.0):
        assert edgeworth_G3(x, 7, spec) == pytest.approx(ndtr(x), abs=1e-15)


def test_g3_converges_with_assertable_bound():
    x = np.linspace(-5, 5, 2001)
    bound = g3_correction_bound(SKEW)
    for n in (10, 100, 1000, 10_000):
        assert np.max(np.abs(edgeworth_G3(x, n, SKEW) - ndtr(x))) <= bound / math.sqrt(n) + 1e-15


def test_g3_monotone_for_large_n():
    x = np.arange(-4, 4.0001, 0.01)
    assert np.all(np.diff(edgeworth_G3(x, 10_000, SKEW)) >= 0)


def test_g3_contracts():
    with pytest.raises(ValueError):
        edgeworth_G3(0.0, 10, EdgeworthSpec(WalkStats(1.0, 0.0, 0.0, 0.0)))
    with pytest.raises(ValueError):
        edgeworth_G3(0.0, 0, SYM)
    with pytest.raises(NotImplementedError):
        EdgeworthSpec(WalkStats(0.5, 1.0, 0.0, 0.0), order=4)


def test_cramer_single_atom():
    r = cramer_check(EnvironmentModel.single(Poisson(2.0), PointMass(0)), 50.0, 2000)
    assert r.sup_abs_lambda == pytest.approx(1.0) and not r.flag


def test_cramer_lattice_resonance():
    s0 = 2 * math.pi / math.log(2)
    r = cramer_check(two_point(2.0, 4.0), s0, 2)
    assert r.sup_abs_lambda == pytest.approx(1.0, abs=1e-12) and not r.flag


def test_cramer_incommensurable_moderate_grid():
    model = EnvironmentModel((EnvAtom(0.5, Poisson(2.0), Poisson(1.0)), EnvAtom(0.5, Poisson(math.e), Poisson(1.0))))
    r = cramer_check(model, 8.0, 4000)
    assert r.sup_abs_lambda < 1 - 1e-3 and r.flag
