import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rapo.boltzmann import (
    STATUS_CONSTANT,
    STATUS_EXCEEDS,
    STATUS_PRIOR,
    STATUS_TIGHT,
    VulnerabilityScores,
    boltzmann_weights,
    joint_kl_decomposition,
    per_step_to_trajectory_budget,
    score_models,
    simplex_project,
    solve_beta,
)
from rapo.ensemble import EnsembleSpec, build_ensemble
from rapo.envs import gridworld
from rapo.exceptions import ConfigError, DomainError
from rapo.mdp import TabularMdp
from rapo.robust_mdp import nominal_policy_evaluation

from oracles import (
    eta_from_kl_grid,
    kl_direct,
    primal_robust_min,
    simplex_projection_bruteforce,
)

LN3 = math.log(3.0)
KL_3_1 = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)


def test_weights_examples():
    prior = np.array([0.2, 0.5, 0.3])
    np.testing.assert_array_equal(boltzmann_weights(prior, [3.0, -1.0, 7.0], 0.0), prior)
    np.testing.assert_allclose(boltzmann_weights(prior, [2.0] * 3, 40.0), prior, atol=1e-15)
    oracle = np.array([1.0, 1.0 / 3.0]) / (4.0 / 3.0)
    np.testing.assert_allclose(boltzmann_weights([0.5, 0.5], [0.0, 1.0], LN3), oracle, atol=1e-15)
    with pytest.raises(DomainError):
        boltzmann_weights([], [], 1.0)


def test_weights_large_beta_stable():
    w = boltzmann_weights([0.5, 0.5], [1000.0, 2000.0], 1e3)
    assert np.all(np.isfinite(w)) and w[0] == 1.0


def test_solve_beta_examples():
    out = solve_beta([0.5, 0.5], [0.0, 1.0], 0.0)
    assert out.beta == 0.0 and out.status == STATUS_PRIOR
    np.testing.assert_array_equal(out.weights, [0.5, 0.5])

    out = solve_beta([0.5, 0.5], [0.0, 1.0], KL_3_1, tol=1e-9)
    oracle = eta_from_kl_grid([0.0, 1.0], [0.5, 0.5], KL_3_1)
    assert out.status == STATUS_TIGHT
    assert out.beta == pytest.approx(oracle, rel=1e-3)
    assert out.beta == pytest.approx(LN3, rel=1e-6)
    np.testing.assert_allclose(out.weights, [0.75, 0.25], atol=1e-8)

    out = solve_beta([0.25, 0.75], [4.0, 4.0], 0.3)
    assert out.status == STATUS_CONSTANT and out.beta == 0.0
    np.testing.assert_array_equal(out.weights, [0.25, 0.75])


def test_solve_beta_budget_beyond_reach():
    out = solve_beta([0.5, 0.5], [0.0, 1.0], math.log(2) + 0.5, beta_max=1e3)
    assert out.status == STATUS_EXCEEDS
    assert out.beta == 1e3
    assert out.kl_to_prior < math.log(2) + 0.5
    assert out.weights[0] > 1 - 1e-12


def test_solve_beta_rejects_bad_kappa():
    with pytest.raises(ConfigError):
        solve_beta([0.5, 0.5], [0.0, 1.0], -0.1)
    with pytest.raises(ConfigError):
        solve_beta([0.5, 0.5], [0.0, 1.0], math.nan)


def test_kl_consistent_with_weights():
    out = solve_beta([0.1, 0.2, 0.7], [0.3, 0.9, 0.5], 0.2)
    assert out.kl_to_prior == pytest.approx(kl_direct(out.weights, [0.1, 0.2, 0.7]), abs=1e-9)


def test_simplex_project_examples():
    p = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(simplex_project(p), p, atol=1e-15)
    np.testing.assert_allclose(simplex_project([0.5, 0.6]), [0.45, 0.55], atol=1e-15)
    # one-hot when the largest entry leads the runner-up by at least 1
    y = np.array([-5.0, -1.0, -3.0])
    np.testing.assert_allclose(simplex_projection_bruteforce(y), [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(simplex_project(y), [0, 1, 0], atol=1e-15)
    # closer negative entries share mass
    y = np.array([-1.0, -2.0, -0.5])
    np.testing.assert_allclose(simplex_project(y), simplex_projection_bruteforce(y), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_simplex_project_matches_bruteforce(y):
    got = simplex_project(y)
    np.testing.assert_allclose(got, simplex_projection_bruteforce(y), atol=1e-9)
    np.testing.assert_allclose(simplex_project(got), got, atol=1e-12)


def test_joint_kl_decomposition_examples():
    assert joint_kl_decomposition([0.5, 0.5], [0.5, 0.5], [0.0, 0.0]) == (0.0, 0.0, 0.0)
    joint, model, traj = joint_kl_decomposition([0.75, 0.25], [0.5, 0.5], [0.1, 0.3])
    assert model == pytest.approx(KL_3_1, abs=1e-15)
    assert traj == pytest.approx(0.15, abs=1e-15)
    assert joint == model + traj
    joint, model, traj = joint_kl_decomposition([1.0, 0.0], [0.5, 0.5], [0.07, 9.0])
    assert model == pytest.approx(math.log(2), abs=1e-15)
    assert traj == pytest.approx(0.07, abs=1e-15)
    assert joint == pytest.approx(math.log(2) + 0.07, abs=1e-15)


def test_per_step_budget():
    assert per_step_to_trajectory_budget(0.0, 0.3) == 0.0
    assert per_step_to_trajectory_budget(0.01, 0.9) == pytest.approx(0.1, abs=1e-15)
    assert per_step_to_trajectory_budget(0.05, 0.5) == pytest.approx(0.1, abs=1e-15)


# -- scoring ---------------------------------------------------------------


def _goal_policy(mdp):
    # greedy nominal policy: good enough as a goal-seeking policy
    from rapo.robust_mdp import nominal_value_iteration

    _, pi, _ = nominal_value_iteration(mdp)
    return pi


def test_score_models_identical_models():
    mdp = gridworld(["S..", "..G"], slip=0.2)
    ens = build_ensemble(mdp, [1.0, 1.0, 1.0])
    v = np.linspace(0, 1, mdp.n_states)
    sc = score_models(v, ens, [0, 1, 2], [1, 2, 3])
    assert np.all(sc.scores == sc.scores[0])


def test_score_models_slip_ordering():
    mdp = gridworld(["S...", "....", "...G"], slip=0.5, gamma=0.9)
    pi = _goal_policy(mdp)
    ens = build_ensemble(mdp, [0.0, 1.8])  # slips 0.0 and 0.9
    states = np.arange(mdp.n_states - 1)
    actions = pi.argmax(axis=1)[states]
    values = [nominal_policy_evaluation(k, mdp.rewards, pi, mdp.gamma) for k in ens.models]
    v = values[0]
    sc = score_models(v, ens, states, actions)
    # oracle: slip 0.9 loses value relative to the deterministic model
    assert values[1][mdp.initial_dist.argmax()] < values[0][mdp.initial_dist.argmax()]
    assert sc.scores[1] < sc.scores[0]


def test_score_models_single_state():
    mdp = TabularMdp(np.ones((1, 2, 1)), [[0.3, 0.6]], 0.9, [1.0])
    ens = EnsembleSpec((mdp.kernel, mdp.kernel), [1.0, 1.0], None)
    sc = score_models(np.array([2.5]), ens, [0, 0], [0, 1])
    np.testing.assert_array_equal(sc.scores, [2.5, 2.5])


def test_score_models_sampled_and_ema():
    mdp = gridworld(["S..", "..G"], slip=0.4)
    ens = build_ensemble(mdp, [0.5, 1.5])
    v = np.linspace(0, 1, mdp.n_states)
    exact = score_models(v, ens, [0, 1], [1, 2])
    sampled = score_models(v, ens, [0, 1], [1, 2], scorer_samples=20000,
                           rng=np.random.default_rng(0))
    np.testing.assert_allclose(sampled.scores, exact.scores, atol=0.02)
    prev = VulnerabilityScores(np.zeros(2))
    sm = score_models(v, ens, [0, 1], [1, 2], previous=prev, ema_decay=0.9)
    np.testing.assert_allclose(sm.scores, 0.1 * exact.scores, atol=1e-15)
    assert sm.raw_history_len == 2


# -- properties ------------------------------------------------------------

scores_st = st.lists(st.floats(0, 1), min_size=2, max_size=5)


@settings(max_examples=100, deadline=None)
@given(scores_st, st.integers(0, 2**31 - 1))
def test_kl_monotone_and_slope(scores, seed):
    h = np.asarray(scores)
    prior = np.random.default_rng(seed).dirichlet(np.ones(h.size))
    betas = np.geomspace(0.01, 50, 40)
    kls = [kl_direct(boltzmann_weights(prior, h, b), prior) for b in betas]
    means = [boltzmann_weights(prior, h, b) @ h for b in betas]
    assert np.all(np.diff(kls) >= -1e-12)
    assert np.all(np.diff(means) <= 1e-12)
    for b in (0.3, 2.0, 7.0):
        d = 1e-4 * b
        fd = (kl_direct(boltzmann_weights(prior, h, b + d), prior)
              - kl_direct(boltzmann_weights(prior, h, b - d), prior)) / (2 * d)
        w = boltzmann_weights(prior, h, b)
        an = b * (w @ h**2 - (w @ h) ** 2)
        if an > 1e-8:
            assert fd == pytest.approx(an, rel=1e-5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=5, unique=True))
def test_concentration_at_beta_max(scores):
    h = np.asarray(scores)
    s = np.sort(h)
    if s[1] - s[0] < 0.02:
        return
    w = boltzmann_weights(np.full(h.size, 1 / h.size), h, 1e3)
    assert w[np.argmin(h)] > 1 - 1e-6


def test_tied_argmin_splits_by_prior():
    w = boltzmann_weights([0.1, 0.3, 0.6], [0.0, 0.0, 1.0], 1e3)
    np.testing.assert_allclose(w, [0.25, 0.75, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=4), st.floats(0.01, 0.8),
       st.integers(0, 2**31 - 1))
def test_primal_match_and_tightness(scores, kappa, seed):
    h = np.asarray(scores)
    prior = np.random.default_rng(seed).dirichlet(np.ones(h.size) * 2)
    out = solve_beta(prior, h, kappa, tol=1e-9)
    if out.status == STATUS_TIGHT:
        assert abs(out.kl_to_prior - kappa) <= 1e-6
    ref, _ = primal_robust_min(h, prior, kappa)
    if out.status in (STATUS_TIGHT, STATUS_CONSTANT):
        assert abs(out.weights @ h - ref) <= 5e-4
