"""Value fitting, advantages and perturbed policy-gradient estimates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import Trajectory
from .policy import Mlp


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Return-to-go ``sum_l gamma^l r_{t+l}`` for every step of one trajectory."""
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class ValueFunction:
    """tanh MLP state-value estimate; targets are standardized internally."""

    def __init__(self, obs_dim: int, hidden: Sequence[int] = (32, 32), rng: np.random.Generator | None = None):
        self.obs_dim = int(obs_dim)
        self.mlp = Mlp((self.obs_dim, *hidden, 1), layer_norm=False)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.flat = self.mlp.init(rng, out_scale=0.01)
        self.offset = 0.0
        self.scale = 1.0
        self.loss_history: list[float] = []

    def __call__(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[-1] != self.obs_dim:
            raise ValueError(f"value function expects {self.obs_dim}-dimensional states")
        out, _ = self.mlp.forward(self.flat, states)
        return self.offset + self.scale * out[:, 0]

    def mse(self, states: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean((self(states) - targets) ** 2))

    def fit(self, states, targets, epochs: int = 5, lr: float = 1e-2, batch_size: int = 64,
            rng: np.random.Generator | None = None) -> list[float]:
        """Minibatch gradient descent on squared error, warm-started from the current weights.

        Returns the full-batch MSE before training and after each epoch.
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        targets = np.asarray(targets, dtype=float)
        if len(targets) == 0:
            raise ValueError("no value targets")
        rng = rng if rng is not None else np.random.default_rng(0)
        # keep predictions continuous across re-standardization
        new_offset = float(targets.mean())
        new_scale = float(targets.std()) or 1.0
        W = self.mlp.view(self.flat, f"W{self.mlp.n_layers - 1}")
        b = self.mlp.view(self.flat, f"b{self.mlp.n_layers - 1}")
        ratio = self.scale / new_scale
        W *= ratio
        b[:] = b * ratio + (self.offset - new_offset) / new_scale
        self.offset, self.scale = new_offset, new_scale
        y = (targets - self.offset) / self.scale

        history = [self.mse(states, targets)]
        m = len(y)
        for _ in range(epochs):
            order = rng.permutation(m)
            for start in range(0, m, batch_size):
                idx = order[start:start + batch_size]
                out, cache = self.mlp.forward(self.flat, states[idx])
                resid = out[:, 0] - y[idx]
                grad = self.mlp.backward(self.flat, cache, (2.0 / len(idx)) * resid[:, None], per_sample=False)
                self.flat -= lr * grad
            history.append(self.mse(states, targets))
        if not np.all(np.isfinite(self.flat)):
            raise FloatingPointError("value function diverged")
        self.loss_history = history
        return history


def fit_value_td1(
    trajectories: Sequence[Trajectory],
    gamma: float,
    epochs: int = 5,
    learning_rate: float = 1e-2,
    value_fn: ValueFunction | None = None,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
) -> ValueFunction:
    """Regress V(s_t) on Monte-Carlo discounted returns over all trajectories."""
    trajectories = [tr for tr in trajectories if len(tr)]
    if not trajectories:
        raise ValueError("no trajectories to fit")
    states = np.concatenate([tr.states for tr in trajectories])
    targets = np.concatenate([discounted_returns(tr.rewards, gamma) for tr in trajectories])
    if value_fn is None:
        value_fn = ValueFunction(states.shape[1], rng=rng)
    value_fn.fit(states, targets, epochs=epochs, lr=learning_rate, batch_size=batch_size, rng=rng)
    return value_fn


def advantages(trajectory: Trajectory, value_fn, gamma: float) -> np.ndarray:
    """Return-to-go minus the baseline ``V(s_t)``, not standardized."""
    if len(trajectory) == 0:
        return np.zeros(0)
    return discounted_returns(trajectory.rewards, gamma) - np.asarray(value_fn(trajectory.states), dtype=float)


def standardize(values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return (values - values.mean()) / (values.std() + eps)


@dataclass
class PerPolicyGradient:
    tag: int
    g: np.ndarray
    sample_count: int
    n_trajectories: int = field(default=1)


def per_policy_gradient(trajectories: Sequence[Trajectory], policy, flat: np.ndarray,
                        advs: Sequence[np.ndarray]) -> PerPolicyGradient:
    """``(1/N_traj) sum_traj sum_t score(flat; s_t, a_t) * A_t`` for one policy tag.

    ``flat`` is the parameter vector that generated the trajectories.
    """
    if not trajectories:
        raise ValueError("no trajectories")
    tags = {tr.tag for tr in trajectories}
    if len(tags) != 1:
        raise ValueError(f"trajectories carry mixed tags {sorted(tags)}")
    states = np.concatenate([tr.states for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    weights = np.concatenate([np.asarray(a, dtype=float) for a in advs])
    if len(weights) != len(states):
        raise ValueError("advantage count does not match sample count")
    g = score_weighted_sum(policy, flat, states, actions, weights) / len(trajectories)
    return PerPolicyGradient(tags.pop(), g, len(states), len(trajectories))


def score_weighted_sum(policy, flat, states, actions, weights) -> np.ndarray:
    """``sum_t weights_t * score(flat; s_t, a_t)`` without materializing per-sample scores."""
    if len(states) == 0:
        return np.zeros(policy.n_params)
    mu, cache = policy.mlp.forward(flat, states)
    ls = policy.log_std(flat)
    inv_var = np.exp(-2.0 * ls)
    diff = actions - mu
    w = weights[:, None]
    out = np.empty(policy.n_params)
    out[: policy.mlp.size] = policy.mlp.backward(flat, cache, w * diff * inv_var, per_sample=False)
    out[policy.ls_slice] = np.sum(w * (diff * diff * inv_var - 1.0), axis=0) * policy._log_std_slope(flat)
    return out


def _ordered(per_policy: Sequence[PerPolicyGradient]) -> list[PerPolicyGradient]:
    return sorted(per_policy, key=lambda p: p.tag)


def perturbed_gradient(per_policy: Sequence[PerPolicyGradient]) -> np.ndarray:
    """Equal-weight mean of the per-policy gradients (summed in tag order)."""
    if not per_policy:
        raise ValueError("no per-policy gradients")
    items = _ordered(per_policy)
    total = np.zeros_like(items[0].g)
    for p in items:
        total = total + p.g
    return total / len(items)


def cov_trace(per_policy: Sequence[PerPolicyGradient]) -> float:
    """Trace of the sample covariance of the per-policy gradients."""
    if len(per_policy) < 2:
        raise ValueError("need at least two per-policy gradients")
    G = np.stack([p.g for p in _ordered(per_policy)])
    dev = G - G.mean(axis=0)
    return float(np.sum(dev * dev) / (len(G) - 1))
