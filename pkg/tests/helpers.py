"""Shared drivers for the trainer tests."""
import numpy as np

from divexp.envs import QuadraticBandit, Trajectory
from divexp.estimation import per_policy_gradient, standardize
from divexp.policy import GaussianMlpPolicy
from divexp.trpo import TrpoConfig, build_batch, trpo_step


def bandit_batch(policy, env, rng, samples):
    # one-step episodes, sampled as a single vectorized batch
    states = env.reset(rng, samples)
    actions = policy.act(states, rng)
    _, rewards, _ = env.step(states, actions, 0)
    trajs = [Trajectory(states[i:i + 1], actions[i:i + 1], rewards[i:i + 1]) for i in range(samples)]
    advs = list(standardize(rewards)[:, None])
    batch = build_batch(policy, policy.get_flat(), trajs, advs, np.zeros((1, policy.n_params)), [0])
    grad = per_policy_gradient(trajs, policy, policy.get_flat(), advs).g
    return batch, grad


def train_bandit(seed, center=0.5, iterations=200, samples=200, config=None, tol=None):
    """Plain TRPO steps on the one-step quadratic bandit; returns the mean-action trace."""
    env = QuadraticBandit(center)
    rng = np.random.default_rng(seed)
    policy = GaussianMlpPolicy(1, 1, (8,), rng=rng)
    config = config or TrpoConfig(fisher="expected")
    state = np.ones((1, 1))
    means = []
    for _ in range(iterations):
        batch, grad = bandit_batch(policy, env, rng, samples)
        F = policy.fisher(batch.states, kind="expected")
        step = trpo_step(policy, policy.get_flat(), batch, grad, F, config)
        policy.set_flat(step.params)
        means.append(float(policy.mean(state)[0, 0]))
        if tol is not None and abs(means[-1] - center) <= tol:
            break
    return np.array(means)
