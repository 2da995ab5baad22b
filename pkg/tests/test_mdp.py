import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tdrepdyn import mdp as mdp_mod
from tdrepdyn.mdp import (
    ConvergenceError,
    MarkovRewardProcess,
    RewardSpec,
    is_reversible,
    key_matrix,
    make_random_mdp,
    make_symmetric_mdp,
    reversibility_residual,
    sample_doubly_stochastic,
    sample_permutation,
    sample_random_rewards,
    stationary_distribution,
    value_function,
)


# ---------------------------------------------------------------- generators


@pytest.mark.parametrize("n", [1, 2, 5, 30])
def test_doubly_stochastic_row_and_col_sums(n):
    P = sample_doubly_stochastic(n, seed=0)
    assert_allclose(P.sum(axis=1), np.ones(n), atol=1e-10)
    assert_allclose(P.sum(axis=0), np.ones(n), atol=1e-10)
    assert (P > 0).all()


def test_doubly_stochastic_2x2_is_symmetric():
    # a 2x2 doubly stochastic matrix is [[a, 1-a], [1-a, a]]
    P = sample_doubly_stochastic(2, seed=7)
    assert abs(P[0, 0] - P[1, 1]) < 1e-12
    assert abs(P[0, 1] - P[1, 0]) < 1e-12


def test_doubly_stochastic_deterministic_and_seed_sensitive():
    a = sample_doubly_stochastic(6, seed=1)
    b = sample_doubly_stochastic(6, seed=1)
    c = sample_doubly_stochastic(6, seed=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_doubly_stochastic_nonconvergence_reports_residual():
    with pytest.raises(ConvergenceError) as info:
        sample_doubly_stochastic(20, seed=0, tol=1e-12, max_iter=2)
    assert info.value.iterations == 2
    assert info.value.residual > 0


@pytest.mark.parametrize("n", [1, 3, 5])
def test_permutation_matrix_property(n):
    P = sample_permutation(n, seed=4)
    assert_allclose(P.sum(axis=0), np.ones(n))
    assert_allclose(P.sum(axis=1), np.ones(n))
    assert set(np.unique(P)) <= {0.0, 1.0}


def test_permutations_vary_across_seeds():
    draws = {sample_permutation(5, seed=s).tobytes() for s in range(10)}
    assert len(draws) > 1  # 5! = 120 possibilities, ten draws collide rarely


def test_make_random_mdp_alpha_endpoints():
    m0 = make_random_mdp(n=6, h=1, gamma=0.9, alpha=0.0, seed=5)
    ds = sample_doubly_stochastic(6, seed=np.random.SeedSequence(5).spawn(3)[0])
    assert_allclose(m0.P, ds)


def test_make_random_mdp_uniform_stationary_and_nonreversible():
    m = make_random_mdp(n=30, h=1, gamma=0.9, alpha=0.95, seed=0)
    assert_allclose(m.d, np.full(30, 1 / 30))  # doubly stochastic => uniform
    assert reversibility_residual(m) > 1e-3
    assert not is_reversible(m)


def test_make_symmetric_mdp_reversible_real_spectrum():
    m = make_symmetric_mdp(n=30, h=1, gamma=0.9, seed=0)
    assert np.array_equal(m.P, m.P.T)
    assert is_reversible(m, tol=1e-10)
    eigs = np.linalg.eigvalsh(m.P)
    assert abs(eigs.max() - 1.0) < 1e-10  # stochastic: top eigenvalue 1


def test_generated_mdps_are_deterministic():
    a = make_random_mdp(n=12, h=3, gamma=0.9, alpha=0.95, seed=11)
    b = make_random_mdp(n=12, h=3, gamma=0.9, alpha=0.95, seed=11)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.R, b.R)


def test_reward_spec_validation():
    with pytest.raises(ValueError):
        RewardSpec(h=0)
    with pytest.raises(ValueError):
        RewardSpec(h=1, sigma=-1.0)
    with pytest.raises(ValueError):
        RewardSpec(h=1, distribution="cauchy")


@pytest.mark.parametrize("distribution", ["normal", "uniform", "rademacher"])
def test_random_rewards_variance_scaling(distribution):
    # per-entry variance sigma^2 / h
    spec = RewardSpec(h=400, sigma=2.0, distribution=distribution)
    R = sample_random_rewards(50, spec, seed=8)
    assert R.shape == (50, 400)
    observed = R.var()
    assert abs(observed - 4.0 / 400) < 0.1 * (4.0 / 400)


# ---------------------------------------------------------------- validation


def test_mrp_rejects_bad_rows():
    P = np.array([[0.7, 0.2], [0.5, 0.5]])  # first row sums to 0.9
    with pytest.raises(ValueError):
        MarkovRewardProcess(P=P, R=np.zeros((2, 1)), gamma=0.9, d=np.array([0.5, 0.5]))


def test_mrp_rejects_gamma_one():
    P = np.full((2, 2), 0.5)
    with pytest.raises(ValueError):
        MarkovRewardProcess(P=P, R=np.zeros((2, 1)), gamma=1.0, d=np.array([0.5, 0.5]))


def test_mrp_rejects_nonstationary_d():
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    with pytest.raises(ValueError):
        MarkovRewardProcess(P=P, R=np.zeros((2, 1)), gamma=0.9, d=np.array([0.5, 0.5]))


def test_mrp_arrays_frozen(small_mixed):
    with pytest.raises(ValueError):
        small_mixed.P[0, 0] = 2.0


# ------------------------------------------------------------------- queries


def test_stationary_distribution_two_state_oracle():
    # d P = d for P=[[.9,.1],[.2,.8]] solves to (2/3, 1/3)
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    d = stationary_distribution(P)
    assert_allclose(d, [2 / 3, 1 / 3], atol=1e-10)


def test_value_function_worked_example(two_state):
    assert_allclose(value_function(two_state), [[5.5], [4.5]], atol=1e-10)


def test_value_function_residual(small_mixed):
    V = value_function(small_mixed)
    resid = V - small_mixed.gamma * small_mixed.P @ V - small_mixed.R
    assert np.abs(resid).max() <= 1e-10


def test_key_matrix_positive_definite(small_mixed):
    A = key_matrix(small_mixed)
    assert_allclose(A, np.diag(small_mixed.d) @ (np.eye(8) - 0.9 * small_mixed.P))
    assert np.linalg.eigvalsh(0.5 * (A + A.T))[0] > 0


# --------------------------------------------------------------- persistence


def test_json_round_trip(tmp_path, small_symmetric):
    path = tmp_path / "m.json"
    mdp_mod.save_mdp(small_symmetric, path, seed=3, generator="symmetric")
    loaded = mdp_mod.load_mdp(path)
    assert np.array_equal(loaded.P, small_symmetric.P)
    assert np.array_equal(loaded.R, small_symmetric.R)
    assert loaded.gamma == small_symmetric.gamma
    doc = json.loads(path.read_text())
    assert doc["generator"] == "symmetric" and doc["seed"] == 3
    assert doc["n"] == 8 and doc["h"] == 2


def test_mdp_from_json_rejects_garbage():
    with pytest.raises(ValueError):
        mdp_mod.mdp_from_json({"n": 2, "gamma": 0.9})


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
