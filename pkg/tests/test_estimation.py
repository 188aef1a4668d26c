import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divexp.envs import QuadraticBandit, Trajectory, rollout
from divexp.estimation import (
    PerPolicyGradient,
    ValueFunction,
    advantages,
    cov_trace,
    discounted_returns,
    fit_value_td1,
    per_policy_gradient,
    perturbed_gradient,
    standardize,
)
from divexp.policy import GaussianMlpPolicy


def traj(rewards, obs_dim=2, act_dim=1, tag=0, seed=0):
    rng = np.random.default_rng(seed)
    n = len(rewards)
    return Trajectory(rng.standard_normal((n, obs_dim)), rng.standard_normal((n, act_dim)),
                      np.asarray(rewards, dtype=float), tag)


def test_discounted_returns_geometric():
    T = 12
    out = discounted_returns(np.ones(T), 0.9)
    assert out[0] == pytest.approx((1 - 0.9**T) / 0.1, rel=1e-12)
    assert out[-1] == 1.0


def test_discounted_returns_manual():
    np.testing.assert_allclose(discounted_returns(np.array([1.0, 2.0, 3.0]), 0.5), [2.75, 3.5, 3.0])


def test_value_single_point_regression():
    tr = Trajectory(np.array([[0.3, -0.2]]), np.zeros((1, 1)), np.array([1.0]))
    vf = fit_value_td1([tr], 0.99, epochs=300, learning_rate=5e-2, rng=np.random.default_rng(0))
    assert vf(tr.states)[0] == pytest.approx(1.0, abs=1e-2)


def test_value_beats_best_constant():
    rng = np.random.default_rng(1)
    trajs = [traj(rng.standard_normal(20), seed=s) for s in range(10)]
    vf = fit_value_td1(trajs, 0.9, epochs=50, rng=rng)
    states = np.concatenate([t.states for t in trajs])
    targets = np.concatenate([discounted_returns(t.rewards, 0.9) for t in trajs])
    assert vf.mse(states, targets) <= np.mean((targets - targets.mean()) ** 2)


def test_value_loss_non_increasing():
    rng = np.random.default_rng(2)
    trajs = [traj(np.sin(np.arange(30) / 5.0) + 0.1 * s, seed=s) for s in range(8)]
    vf = fit_value_td1(trajs, 0.95, epochs=10, learning_rate=1e-2, rng=rng)
    h = np.array(vf.loss_history)
    assert h[-1] < h[0]
    assert np.all(np.diff(h) <= 0.05 * h[0])


def test_value_fit_errors():
    with pytest.raises(ValueError):
        fit_value_td1([], 0.9)
    with pytest.raises(ValueError):
        ValueFunction(3)(np.zeros((2, 2)))


class Const:
    def __init__(self, c):
        self.c = c

    def __call__(self, states):
        return np.full(len(states), self.c)


def test_advantages_zero_baseline():
    tr = traj([1.0, 0.0, 2.0])
    np.testing.assert_array_equal(advantages(tr, Const(0.0), 0.9), discounted_returns(tr.rewards, 0.9))


def test_advantages_exact_baseline_is_zero():
    tr = traj([1.0, 0.5, 2.0])
    ret = discounted_returns(tr.rewards, 0.9)
    lookup = {s.tobytes(): r for s, r in zip(tr.states, ret)}
    exact = lambda states: np.array([lookup[s.tobytes()] for s in states])  # noqa: E731
    np.testing.assert_allclose(advantages(tr, exact, 0.9), 0.0, atol=1e-15)


def test_advantages_shift():
    tr = traj([1.0, -1.0, 0.5, 3.0])
    a0 = advantages(tr, Const(0.25), 0.9)
    a1 = advantages(tr, Const(0.25 + 1.5), 0.9)
    np.testing.assert_allclose(a0 - a1, 1.5, rtol=0, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40))
def test_standardize_preserves_order(values):
    v = np.array(values)
    if np.ptp(v) < 1e-6:
        return
    s = standardize(v)
    assert abs(s.mean()) <= 1e-9
    assert s[np.argmax(v)] == s.max()
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(s[order]) >= 0)


def small_policy(obs_dim=2, act_dim=1, seed=0):
    return GaussianMlpPolicy(obs_dim, act_dim, (6,), rng=np.random.default_rng(seed))


def test_zero_advantages_zero_gradient():
    pol = small_policy()
    trs = [traj([1.0, 2.0]), traj([0.0], seed=1)]
    g = per_policy_gradient(trs, pol, pol.get_flat(), [np.zeros(2), np.zeros(1)])
    np.testing.assert_array_equal(g.g, 0.0)
    assert g.sample_count == 3


def test_one_step_gradient_is_weighted_score():
    pol = small_policy()
    tr = traj([0.7])
    flat = pol.get_flat()
    g = per_policy_gradient([tr], pol, flat, [np.array([0.7])])
    np.testing.assert_allclose(g.g, 0.7 * pol.score(tr.states, tr.actions, flat)[0], rtol=1e-12, atol=1e-14)


def test_gradient_uses_generating_params():
    pol = small_policy()
    tr = traj([1.0, 1.0], tag=3)
    shifted = pol.get_flat() + 0.1
    g = per_policy_gradient([tr], pol, shifted, [np.array([1.0, -2.0])])
    expected = pol.score(tr.states, tr.actions, shifted).T @ np.array([1.0, -2.0])
    np.testing.assert_allclose(g.g, expected, rtol=1e-12, atol=1e-13)
    assert g.tag == 3


def test_mixed_tags_rejected():
    pol = small_policy()
    with pytest.raises(ValueError):
        per_policy_gradient([traj([1.0], tag=0), traj([1.0], tag=1)], pol, pol.get_flat(), [np.ones(1)] * 2)
    with pytest.raises(ValueError):
        per_policy_gradient([], pol, pol.get_flat(), [])


def test_ascent_direction_on_bandit():
    env = QuadraticBandit(0.5)
    pol = small_policy(1, 1, seed=4)
    flat = pol.get_flat()
    rng = np.random.default_rng(0)
    trs = [rollout(env, pol, rng, 1) for _ in range(200)]
    advs = [np.array([t.rewards[0]]) for t in trs]
    advs = list(standardize(np.concatenate(advs))[:, None])
    g = per_policy_gradient(trs, pol, flat, advs).g
    states = np.concatenate([t.states for t in trs])
    actions = np.concatenate([t.actions for t in trs])
    w = np.concatenate(advs)

    def objective(p):
        return float(np.sum(w * pol.log_prob(states, actions, p)))

    h = 1e-4 / np.linalg.norm(g)
    assert objective(flat + h * g) > objective(flat) > objective(flat - h * g)


def ppg(tag, g):
    return PerPolicyGradient(tag, np.asarray(g, dtype=float), 1)


def test_perturbed_gradient_examples():
    g = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(perturbed_gradient([ppg(0, g)]), g)
    np.testing.assert_array_equal(perturbed_gradient([ppg(1, g), ppg(-1, -g)]), 0.0)
    np.testing.assert_allclose(perturbed_gradient([ppg(t, g) for t in range(5)]), g, rtol=1e-15)
    with pytest.raises(ValueError):
        perturbed_gradient([])


def test_perturbed_gradient_permutation_invariant():
    rng = np.random.default_rng(5)
    items = [ppg(t, rng.standard_normal(7)) for t in (0, 1, -1, 2, -2)]
    ref = perturbed_gradient(items)
    for perm in itertools.permutations(items):
        assert perturbed_gradient(list(perm)).tobytes() == ref.tobytes()


def test_cov_trace_examples():
    g = np.array([1.0, 2.0])
    assert cov_trace([ppg(0, g), ppg(1, g)]) == 0.0
    assert cov_trace([ppg(0, [1.0]), ppg(1, [-1.0])]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        cov_trace([ppg(0, g)])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_cov_trace_matches_dense(k, n, seed):
    G = np.random.default_rng(seed).standard_normal((k, n))
    dense = np.trace(np.cov(G, rowvar=False, ddof=1).reshape(n, n))
    value = cov_trace([ppg(i, row) for i, row in enumerate(G)])
    assert value >= 0
    assert value == pytest.approx(dense, rel=1e-10)


def test_zero_perturbations_match_plain_policy_gradient():
    # every tag runs the main policy, so pooling equals the single-policy estimate
    pol = small_policy(2, 1, seed=7)
    flat = pol.get_flat()
    trs = [traj(np.arange(5.0) * s, tag=0, seed=s) for s in range(6)]
    advs = [np.linspace(-1, 1, 5) * (s + 1) for s in range(6)]
    pooled = per_policy_gradient(trs, pol, flat, advs).g
    plain = sum(pol.score(t.states, t.actions, flat).T @ a for t, a in zip(trs, advs)) / len(trs)
    np.testing.assert_allclose(pooled, plain, rtol=1e-12, atol=1e-12)
