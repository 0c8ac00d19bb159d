import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpire.env_model import (
    EnvAtom,
    EnvironmentModel,
    EnvPath,
    Finite,
    InvalidSpecError,
    LinearFractional,
    PointMass,
    Poisson,
    mean,
    pgf_eval,
    sample_env,
    spec_from_dict,
    validate_assumptions,
)

specs = st.one_of(
    st.integers(0, 6).map(PointMass),
    st.floats(0.01, 8.0).map(Poisson),
    st.tuples(st.floats(0.0, 0.95), st.floats(0.0, 0.95)).map(lambda t: LinearFractional(*t)),
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6)
    .filter(lambda v: sum(v) > 0.1)
    .map(lambda v: Finite(tuple(x / sum(v) for x in v))),
)


def test_pgf_examples():
    assert pgf_eval(Poisson(1.0), 1) == pytest.approx(1.0, abs=1e-15)
    assert pgf_eval(Poisson(1.0), 0) == pytest.approx(math.exp(-1), abs=1e-15)
    assert pgf_eval(LinearFractional(0.2, 0.5), 0) == pytest.approx(0.2, abs=1e-15)


def test_linear_fractional_pgf_formula():
    a, b, s = 0.2, 0.5, 0.3 + 0.4j
    assert pgf_eval(LinearFractional(a, b), s) == pytest.approx(a + (1 - a) * (1 - b) * s / (1 - b * s), abs=1e-15)


def test_mean_examples():
    assert mean(Poisson(1.6)) == 1.6
    assert mean(LinearFractional(0.2, 0.5)) == pytest.approx(1.6)
    assert mean(PointMass(1)) == 1


def test_pgf_rejects_points_outside_disk():
    with pytest.raises(ValueError):
        pgf_eval(Poisson(1.0), 1.01)


@pytest.mark.parametrize(
    "bad",
    [
        lambda: Poisson(-1.0),
        lambda: LinearFractional(1.0, 0.2),
        lambda: LinearFractional(0.2, 1.0),
        lambda: Finite((0.5, 0.4)),
        lambda: Finite((1.2, -0.2)),
        lambda: PointMass(-1),
    ],
)
def test_invalid_specs_raise(bad):
    with pytest.raises(InvalidSpecError):
        bad()


def test_offspring_mean_must_be_positive():
    with pytest.raises(InvalidSpecError):
        EnvAtom(1.0, PointMass(0), PointMass(0))


@settings(max_examples=60, deadline=None)
@given(specs)
def test_pgf_at_one_and_modulus_bound(spec):
    assert abs(pgf_eval(spec, 1.0) - 1) <= 1e-12
    rng = np.random.default_rng(0)
    z = np.sqrt(rng.uniform(0, 1, 1000)) * np.exp(2j * np.pi * rng.uniform(0, 1, 1000))
    assert np.all(np.abs(pgf_eval(spec, z)) <= 1 + 1e-9)


@settings(max_examples=60, deadline=None)
@given(specs)
def test_pgf_derivative_matches_mean(spec):
    h = 1e-6
    # the upper point leaves the disk, so use a one-sided stencil of the same order
    d = (3 * pgf_eval(spec, 1.0) - 4 * pgf_eval(spec, 1 - h) + pgf_eval(spec, 1 - 2 * h)).real / (2 * h)
    m = mean(spec)
    assert abs(d - m) <= 1e-4 * max(m, 1.0)


@settings(max_examples=40, deadline=None)
@given(specs)
def test_spec_json_round_trip(spec):
    assert spec_from_dict(spec.to_dict()) == spec


M_STAR = EnvironmentModel(
    (
        EnvAtom(0.5, LinearFractional(0.3, 0.55), Poisson(0.4)),
        EnvAtom(0.5, Poisson(2.2), Poisson(0.4)),
    )
)


def test_sample_env_single_atom_repeats():
    f, h = LinearFractional(0.3, 0.4), Poisson(0.5)
    env = sample_env(EnvironmentModel.single(f, h), 5, seed=3)
    assert env.steps == ((f, h),) * 5


def test_sample_env_zero_weight_atom_never_drawn():
    model = EnvironmentModel((EnvAtom(1.0, Poisson(2.0), PointMass(0)), EnvAtom(0.0, Poisson(3.0), PointMass(1))))
    env = sample_env(model, 3, seed=1)
    assert all(step == (Poisson(2.0), PointMass(0)) for step in env.steps)


def test_sample_env_frequency_within_three_sigma():
    env = sample_env(M_STAR, 10_000, seed=42)
    freq = np.mean([step[0] == M_STAR.atoms[0].offspring for step in env.steps])
    assert abs(freq - 0.5) <= 3 * 0.005


def test_sample_env_reproducible():
    assert sample_env(M_STAR, 50, 9) == sample_env(M_STAR, 50, 9)
    assert sample_env(M_STAR, 50, 9) != sample_env(M_STAR, 50, 10)


def test_steps_keep_offspring_and_immigration_from_one_atom():
    model = EnvironmentModel((EnvAtom(0.5, Poisson(2.0), PointMass(0)), EnvAtom(0.5, Poisson(3.0), PointMass(4))))
    env = sample_env(model, 200, seed=5)
    pairs = {(Poisson(2.0), PointMass(0)), (Poisson(3.0), PointMass(4))}
    assert set(env.steps) <= pairs


def test_weights_must_sum_to_one():
    with pytest.raises(InvalidSpecError):
        EnvironmentModel((EnvAtom(0.5, Poisson(2.0), PointMass(0)),))
    with pytest.raises(InvalidSpecError):
        EnvironmentModel(())


def test_validate_linear_fractional_example():
    model = EnvironmentModel.single(LinearFractional(0.3, 0.4), Poisson(0.5))
    rep = validate_assumptions(model, 0.5, 2.0, 2.0)
    assert rep.A.holds and rep.A.witness["f1"] == pytest.approx(0.42)
    assert rep.A.witness["h0"] == pytest.approx(math.exp(-0.5))
    assert rep.B.holds and rep.B.witness["f0"] == pytest.approx(0.3)
    assert rep.supercritical.holds and rep.mu == pytest.approx(math.log(0.7 / 0.6))


def test_validate_point_mass_one_fails_a():
    rep = validate_assumptions(EnvironmentModel.single(PointMass(1), Poisson(0.5)), 0.5, 2.0, 2.0)
    assert not rep.A.holds
    assert "Assumption (A)" in rep.failures()


def test_validate_log_symmetric_model_not_supercritical():
    model = EnvironmentModel((EnvAtom(0.5, Poisson(2.0), Poisson(1.0)), EnvAtom(0.5, Poisson(0.5), Poisson(1.0))))
    rep = validate_assumptions(model, 0.9, 2.0, 2.0)
    assert rep.mu == pytest.approx(0.0, abs=1e-15)
    assert not rep.supercritical.holds


def test_reference_model_meets_all_assumptions():
    rep = validate_assumptions(M_STAR, 0.35, 2.0, 4.0)
    assert rep.required_ok and rep.nonlattice_plausible.holds


def test_lattice_means_are_flagged():
    model = EnvironmentModel((EnvAtom(0.5, PointMass(2), Poisson(1.0)), EnvAtom(0.5, PointMass(4), Poisson(1.0))))
    assert not validate_assumptions(model, 0.5, 2.0, 2.0).nonlattice_plausible.holds


@pytest.mark.parametrize("args", [(0.0, 2.0, 2.0), (1.0, 2.0, 2.0), (0.5, 1.0, 2.0), (0.5, 2.5, 2.0), (0.5, 2.0, 1.0)])
def test_validate_rejects_parameter_ranges(args):
    with pytest.raises(ValueError):
        validate_assumptions(M_STAR, *args)


def test_validate_is_pure():
    assert validate_assumptions(M_STAR, 0.35, 2.0, 4.0) == validate_assumptions(M_STAR, 0.35, 2.0, 4.0)


def test_model_json_round_trip():
    assert EnvironmentModel.from_dict(M_STAR.to_dict()) == M_STAR


def test_env_path_helpers():
    env = EnvPath.constant(Poisson(2.0), PointMass(1), 4)
    assert len(env) == 4
    assert all(h == PointMass(0) for h in env.without_immigration().immigration)
    assert len(env.shifted(1)) == 3
