import numpy as np
import pytest

from bpire.env_model import EnvAtom, EnvironmentModel, EnvPath, LinearFractional, PointMass, Poisson, sample_env
from bpire.pgf_engine import annealed_prob, quenched_law_series
from bpire.seeding import stream
from bpire.simulator import (
    AllExtinct,
    delta_records,
    simulate_annealed,
    simulate_batch,
    simulate_decomposed,
    simulate_paths,
    simulate_quenched,
    write_paths_csv,
)

from oracles import chi_square_pvalue

M_STAR = EnvironmentModel(
    (
        EnvAtom(0.5, LinearFractional(0.3, 0.55), Poisson(0.4)),
        EnvAtom(0.5, Poisson(2.2), Poisson(0.4)),
    )
)


def test_identity_offspring_keeps_count():
    s = simulate_quenched(EnvPath.constant(PointMass(1), PointMass(0), 6), 7, seed=1)
    assert list(s.z) == [7] * 7


def test_doubling():
    s = simulate_quenched(EnvPath.constant(PointMass(2), PointMass(0), 5), 1, seed=1)
    assert list(s.z) == [1, 2, 4, 8, 16, 32]


def test_one_immigrant_per_step():
    s = simulate_quenched(EnvPath.constant(PointMass(1), PointMass(1), 4), 1, seed=1)
    assert list(s.z) == [1, 2, 3, 4, 5]
    assert s.survived_at.all()


def test_survival_flags_follow_counts():
    s = simulate_quenched(sample_env(M_STAR, 30, 2), 1, seed=5)
    assert np.array_equal(s.survived_at, s.z != 0)
    assert s.z[0] == 1 and np.all((s.z >= 0) | (s.z == -1))


def test_annealed_reproducible():
    a_env, a = simulate_annealed(M_STAR, 2, 20, seed=11)
    b_env, b = simulate_annealed(M_STAR, 2, 20, seed=11)
    assert a_env == b_env and np.array_equal(a.z, b.z)


def test_single_atom_annealed_is_quenched():
    model = EnvironmentModel.single(Poisson(1.3), Poisson(0.2))
    env, path = simulate_annealed(model, 1, 5, seed=4)
    assert env == EnvPath.constant(Poisson(1.3), Poisson(0.2), 5)


def test_one_step_extinction_frequency_matches_exact():
    bp = simulate_paths(M_STAR, 1, 1, 100_000, seed=3)
    freq = np.mean(bp.z_at(1) == 0)
    exact = annealed_prob(M_STAR, 1, 1, "p_zero", R=2, idx=np.array([[0], [1]])).estimate
    assert abs(freq - exact) <= 3 * np.sqrt(exact * (1 - exact) / 100_000)


@pytest.mark.parametrize("n", [3, 8])
def test_quenched_law_chi_square(n):
    env = sample_env(M_STAR, n, seed=n)
    idx = np.tile([0 if st[0] == M_STAR.atoms[0].offspring else 1 for st in env.steps], (100_000, 1))
    bp = simulate_batch(M_STAR, idx, 1, seed=n, record=[n])
    law = quenched_law_series(env, 1, K=64)
    assert chi_square_pvalue(bp.z[:, 0], law.coeffs) > 1e-3


def test_markov_spot_check():
    bp = simulate_paths(M_STAR, 1, 6, 200_000, seed=8, record=[5, 6])
    z5, z6 = bp.z_at(5), bp.z_at(6)
    # the annealed one-step law from a fixed count averages the two atoms
    for z in (1, 2):
        sel = z6[z5 == z]
        one = [quenched_law_series(EnvPath.constant(a.offspring, a.immigration, 1), z, K=64).coeffs for a in M_STAR.atoms]
        law = 0.5 * one[0] + 0.5 * one[1]
        assert chi_square_pvalue(sel, law) > 1e-3


def test_batch_independent_of_workers():
    idx = np.zeros((9000, 12), dtype=np.int64)
    idx[:, ::2] = 1
    a = simulate_batch(M_STAR, idx, 1, seed=2, workers=1)
    b = simulate_batch(M_STAR, idx, 1, seed=2, workers=3)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.log_z, b.log_z)


def test_huge_populations_switch_to_log_scale():
    env = EnvPath.constant(Poisson(30.0), PointMass(0), 14)
    s = simulate_quenched(env, 1, seed=1)
    assert s.switch_gen is not None
    assert s.log_z[-1] == pytest.approx(14 * np.log(30.0), abs=1.0)


def test_decomposition_without_immigration():
    d = simulate_decomposed(sample_env(M_STAR, 10, 1).without_immigration(), 2, seed=1)
    assert np.all(d.immig_lines == 0)
    assert np.array_equal(d.z, d.z0)


def test_decomposition_immigrant_lines_only():
    d = simulate_decomposed(EnvPath.constant(PointMass(1), PointMass(1), 6), 0, seed=1)
    assert d.z[-1] == 6


def test_decomposition_identity_on_many_seeds():
    for seed in range(1000):
        env = sample_env(M_STAR, 8, seed)
        d = simulate_decomposed(env, 1, seed)
        assert d.check()
        assert np.array_equal(d.z, d.z0 + d.immig_lines.sum(axis=0))


def test_delta_deterministic_ratio_is_exact():
    model = EnvironmentModel.single(PointMass(2), PointMass(0))
    s = delta_records(model, 1, 5, 100, 2.0, 1.0, seed=1)
    assert s.abs_dev_p == (0.0, 0.0) and s.weighted_dev == (0.0, 0.0) and s.abs_log_delta == (0.0, 0.0)


def test_delta_clt_for_iid_sums():
    model = EnvironmentModel.single(Poisson(2.0), PointMass(0))
    s = delta_records(model, 10_000, 0, 4000, 2.0, 0.0, seed=3)
    est, se = s.abs_dev_p
    assert abs(est - 5e-5) <= 3 * se


def test_delta_decays_in_n():
    a = delta_records(M_STAR, 1, 5, 20_000, 2.0, 0.0, seed=4)
    b = delta_records(M_STAR, 1, 15, 20_000, 2.0, 0.0, seed=4)
    assert b.abs_dev_p[0] / a.abs_dev_p[0] < 1


def test_delta_contract():
    with pytest.raises(ValueError):
        delta_records(M_STAR, 1, 5, 99, 2.0, 0.0, seed=1)
    with pytest.raises(ValueError):
        delta_records(M_STAR, 1, 5, 100, 2.5, 0.0, seed=1)
    with pytest.raises(AllExtinct):
        delta_records(EnvironmentModel.single(Poisson(0.01), PointMass(0)), 1, 30, 100, 2.0, 0.0, seed=1)


def test_paths_csv(tmp_path):
    bp = simulate_paths(M_STAR, 1, 3, 5, seed=1)
    p = tmp_path / "paths.csv"
    write_paths_csv(p, bp, "config_hash=abc")
    lines = p.read_text().splitlines()
    assert lines[0] == "path_id,n,Z_n,scale,survived"
    assert lines[-1] == "# config_hash=abc"


def test_streams_are_distinct():
    a = stream(1, 0, 5).random(4)
    b = stream(1, 1, 5).random(4)
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        stream(None, 0)
