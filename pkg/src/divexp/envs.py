"""Small continuous-control environments and trajectory collection.

Every environment is vectorized over a leading batch axis, has deterministic
dynamics, and clips actions to ``[-1, 1]`` before applying them. Episodes end
only at the horizon; none of the provided tasks has a terminal predicate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    tag: int = 0
    # True when the episode was cut by the sampling budget before the horizon
    truncated: bool = False

    def __post_init__(self):
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states, actions and rewards must have equal length")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def _require_positive(**values) -> None:
    for name, v in values.items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")


class Env:
    obs_dim: int
    act_dim: int
    horizon: int
    # per-step bound on |reward| under clipped actions
    reward_bound: float

    def reset(self, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def terminal(self, states: np.ndarray) -> np.ndarray:
        return np.zeros(states.shape[:-1], dtype=bool)

    def step(self, state: np.ndarray, action: np.ndarray, t: int | None = None):
        """Advance one step; returns ``(next_state, reward, done)``.

        ``done`` is the terminal predicate, or the horizon when ``t`` (the
        index of the step being taken) is given.
        """
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float)
        if state.shape[-1] != self.obs_dim or action.shape[-1] != self.act_dim:
            raise ValueError("state/action dimension mismatch")
        nxt, reward = self.dynamics(state, np.clip(action, -1.0, 1.0))
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError("non-finite state")
        done = self.terminal(nxt)
        if t is not None and t + 1 >= self.horizon:
            done = np.ones_like(done)
        return nxt, reward, done

    def _draw(self, rng, count, sampler):
        if count is None:
            return sampler(1)[0]
        return sampler(count)


class LQR(Env):
    """Linear dynamics ``s' = A s + B a`` with reward ``-(s'Qs + a'Ra)``."""

    def __init__(self, A, B, Q=None, R=None, start_mean=None, start_std=0.0, horizon: int = 50):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.obs_dim, self.act_dim = self.B.shape
        if self.A.shape != (self.obs_dim, self.obs_dim):
            raise ValueError("A must be square with the row count of B")
        self.Q = np.eye(self.obs_dim) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
        self.R = np.eye(self.act_dim) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
        if self.Q.shape != (self.obs_dim,) * 2 or self.R.shape != (self.act_dim,) * 2:
            raise ValueError("Q/R shapes do not match the system")
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        self.start_mean = np.zeros(self.obs_dim) if start_mean is None else np.asarray(start_mean, dtype=float)
        self.start_std = float(start_std)
        _require_positive(horizon=horizon)
        if self.start_std < 0:
            raise ValueError("start_std must be non-negative")
        self.horizon = int(horizon)
        # reward bound over one episode for starts within 5 standard deviations of the mean
        a_norm = float(np.linalg.norm(self.A, 2))
        b_norm = float(np.linalg.norm(self.B, 2)) * math.sqrt(self.act_dim)
        radius = float(np.linalg.norm(np.abs(self.start_mean) + 5.0 * self.start_std))
        worst = radius
        for _ in range(self.horizon):
            worst = max(worst, a_norm * worst + b_norm)
        self.reward_bound = float(np.linalg.eigvalsh(self.Q).max() * worst**2
                                  + np.linalg.eigvalsh(self.R).max() * self.act_dim)

    @classmethod
    def default(cls, **overrides) -> "LQR":
        """Discretized double integrator (dt = 0.1); keyword arguments replace individual fields."""
        dt = 0.1
        params = dict(
            A=[[1.0, dt], [0.0, 1.0]],
            B=[[0.5 * dt * dt], [dt]],
            Q=np.eye(2),
            R=0.1 * np.eye(1),
            start_mean=np.zeros(2),
            start_std=0.5,
            horizon=50,
        )
        unknown = set(overrides) - set(params)
        if unknown:
            raise TypeError(f"unknown LQR parameters {sorted(unknown)}")
        params.update(overrides)
        return cls(**params)

    def reset(self, rng, count=None):
        return self._draw(
            rng, count, lambda c: self.start_mean + self.start_std * rng.standard_normal((c, self.obs_dim))
        )

    def dynamics(self, s, a):
        reward = -(np.einsum("...i,ij,...j->...", s, self.Q, s) + np.einsum("...i,ij,...j->...", a, self.R, a))
        return s @ self.A.T + a @ self.B.T, reward


class PointMass(Env):
    """Damped 2-D point mass pushed toward the origin.

    State ``(x, y, vx, vy)``; action is a force in ``[-1, 1]^2``.
    ``v' = (1 - friction dt) v + dt a``, ``p' = clip(p + dt v', -2, 2)``; the
    velocity component is zeroed at a wall. Reward ``-|p'| - 0.01 |a|^2``.
    Starts uniform in ``[-1, 1]^2`` at rest.
    """

    obs_dim = 4
    act_dim = 2

    def __init__(self, horizon: int = 100, dt: float = 0.1, friction: float = 1.0, arena: float = 2.0):
        _require_positive(horizon=horizon, dt=dt, arena=arena)
        self.horizon = int(horizon)
        self.dt = float(dt)
        self.friction = float(friction)
        self.arena = float(arena)
        self.reward_bound = math.sqrt(2.0) * self.arena + 0.02

    def reset(self, rng, count=None):
        def sample(c):
            s = np.zeros((c, 4))
            s[:, :2] = rng.uniform(-1.0, 1.0, size=(c, 2))
            return s

        return self._draw(rng, count, sample)

    def dynamics(self, s, a):
        p, v = s[..., :2], s[..., 2:]
        v = (1.0 - self.friction * self.dt) * v + self.dt * a
        p_free = p + self.dt * v
        p = np.clip(p_free, -self.arena, self.arena)
        v = np.where(p != p_free, 0.0, v)
        reward = -np.linalg.norm(p, axis=-1) - 0.01 * np.sum(a * a, axis=-1)
        return np.concatenate([p, v], axis=-1), reward


class Pendulum(Env):
    """Torque-limited pendulum, angle 0 is upright.

    Observation ``(cos th, sin th, th_dot)``. Semi-implicit Euler:
    ``th_dot' = clip(th_dot + dt (g/l sin th + torque), -max_speed, max_speed)``,
    ``th' = th + dt th_dot'`` with ``torque = max_torque * a``. Reward is
    ``-scale (th^2 + 0.1 th_dot^2 + 0.001 torque^2)`` with ``th`` wrapped to
    ``[-pi, pi)``. Starts with ``th ~ U(-pi, pi)``, ``th_dot ~ U(-1, 1)``.
    """

    obs_dim = 3
    act_dim = 1

    def __init__(
        self,
        horizon: int = 200,
        dt: float = 0.05,
        g_over_l: float = 10.0,
        max_torque: float = 2.0,
        max_speed: float = 8.0,
        reward_scale: float = 1.0 / 32.0,
    ):
        _require_positive(horizon=horizon, dt=dt, max_speed=max_speed)
        self.horizon = int(horizon)
        self.dt = float(dt)
        self.g_over_l = float(g_over_l)
        self.max_torque = float(max_torque)
        self.max_speed = float(max_speed)
        self.reward_scale = float(reward_scale)
        self.reward_bound = self.reward_scale * (
            math.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2
        )

    @staticmethod
    def angle(s: np.ndarray) -> np.ndarray:
        return np.arctan2(s[..., 1], s[..., 0])

    def energy(self, s: np.ndarray) -> np.ndarray:
        """Mechanical energy per unit inertia, conserved by the torque-free flow."""
        return 0.5 * s[..., 2] ** 2 + self.g_over_l * s[..., 0]

    def reset(self, rng, count=None):
        def sample(c):
            th = rng.uniform(-math.pi, math.pi, size=c)
            thdot = rng.uniform(-1.0, 1.0, size=c)
            return np.stack([np.cos(th), np.sin(th), thdot], axis=-1)

        return self._draw(rng, count, sample)

    def dynamics(self, s, a):
        th = self.angle(s)
        thdot = s[..., 2]
        torque = self.max_torque * a[..., 0]
        cost = th**2 + 0.1 * thdot**2 + 0.001 * torque**2
        thdot = np.clip(thdot + self.dt * (self.g_over_l * np.sin(th) + torque), -self.max_speed, self.max_speed)
        th = th + self.dt * thdot
        return np.stack([np.cos(th), np.sin(th), thdot], axis=-1), -self.reward_scale * cost


class QuadraticBandit(Env):
    """One-step task with a constant observation and reward ``-(a - center)^2``."""

    obs_dim = 1
    act_dim = 1
    horizon = 1

    def __init__(self, center: float = 0.5):
        if not -1.0 <= center <= 1.0:
            raise ValueError("center must lie inside the action bounds [-1, 1]")
        self.center = float(center)
        self.reward_bound = (1.0 + abs(self.center)) ** 2

    def reset(self, rng, count=None):
        return self._draw(rng, count, lambda c: np.ones((c, 1)))

    def dynamics(self, s, a):
        return s.copy(), -((a[..., 0] - self.center) ** 2)


ENVIRONMENTS = {"lqr": LQR.default, "pointmass": PointMass, "pendulum": Pendulum}


def make_env(kind: str, **params) -> Env:
    kind = kind.lower()
    if kind == "lqr":
        return LQR.default(**params)
    if kind == "pointmass":
        return PointMass(**params)
    if kind == "pendulum":
        return Pendulum(**params)
    raise ValueError(f"unknown environment {kind!r}; choose from {sorted(ENVIRONMENTS)}")


def rollout(env: Env, policy, rng: np.random.Generator, max_steps: int, flat=None, tag: int = 0,
            deterministic: bool = False) -> Trajectory:
    """Run one episode of ``policy`` (optionally at parameters ``flat``)."""
    if policy.obs_dim != env.obs_dim:
        raise ValueError("policy input dimension does not match the environment")
    states, actions, rewards = [], [], []
    if max_steps <= 0:
        return Trajectory(np.zeros((0, env.obs_dim)), np.zeros((0, env.act_dim)), np.zeros(0), tag)
    s = env.reset(rng)
    for t in range(min(max_steps, env.horizon)):
        a = policy.mean(s, flat) if deterministic else policy.act(s, rng, flat)
        nxt, r, done = env.step(s, a, t)
        states.append(s)
        actions.append(a)
        rewards.append(float(r))
        s = nxt
        if done:
            break
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), tag)


def collect(env: Env, policy, params: np.ndarray, budgets, tags, rng: np.random.Generator) -> list[Trajectory]:
    """Sample ``budgets[i]`` environment steps from the policy at ``params[i]``.

    All episodes run in lockstep. Each policy gets ``ceil(budget / horizon)``
    episodes and the last one is cut so the step count equals the budget
    exactly; cut episodes are flagged ``truncated``.
    """
    params = np.atleast_2d(params)
    if policy.obs_dim != env.obs_dim:
        raise ValueError("policy input dimension does not match the environment")
    owner, limit = [], []
    for i, b in enumerate(budgets):
        b = int(b)
        while b > 0:
            owner.append(i)
            limit.append(min(b, env.horizon))
            b -= env.horizon
    if not owner:
        return []
    owner = np.array(owner)
    limit = np.array(limit)
    E, T = len(owner), int(limit.max())
    ep_params = params[owner]
    S = np.empty((T, E, env.obs_dim))
    A = np.empty((T, E, env.act_dim))
    Rw = np.empty((T, E))
    ended = np.full(E, T)
    s = env.reset(rng, E)
    std = np.exp(policy.log_std(ep_params))
    for t in range(T):
        mu = policy.mean(s, ep_params)
        a = mu + std * rng.standard_normal(mu.shape)
        nxt, r, done = env.step(s, a, t)
        S[t], A[t], Rw[t] = s, a, r
        newly = done & (ended == T)
        ended[newly] = t + 1
        s = nxt
    trajs = []
    for e in range(E):
        L = int(min(limit[e], ended[e]))
        trajs.append(
            Trajectory(S[:L, e].copy(), A[:L, e].copy(), Rw[:L, e].copy(), int(tags[owner[e]]),
                       truncated=L < env.horizon and ended[e] > L)
        )
    return trajs


def evaluate_controller(env: Env, gain: np.ndarray, rng: np.random.Generator, episodes: int, gamma: float) -> np.ndarray:
    """Discounted returns of the linear controller ``a = -K s`` over ``episodes`` rollouts."""
    K = np.atleast_2d(gain)
    s = env.reset(rng, episodes)
    ret = np.zeros(episodes)
    disc = 1.0
    for t in range(env.horizon):
        s, r, _ = env.step(s, -s @ K.T, t)
        ret += disc * r
        disc *= gamma
    return ret


def lqr_riccati(env: LQR, gamma: float, tol: float = 1e-10, max_iters: int = 100_000):
    """Discounted Riccati fixed point ``P`` and optimal gain ``K`` (``a = -K s``)."""
    A, B, Q, R = env.A, env.B, env.Q, env.R
    P = Q.copy()
    for _ in range(max_iters):
        BtP = B.T @ P
        K = gamma * np.linalg.solve(R + gamma * BtP @ B, BtP @ A)
        P_new = Q + gamma * A.T @ P @ A - gamma * A.T @ P @ B @ K
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)) or np.abs(P_new).max() > 1e12:
            raise ArithmeticError("Riccati iteration diverged; (A, B) is not stabilizable under this discount")
        if np.abs(P_new - P).max() <= tol * max(1.0, np.abs(P_new).max()):
            P = P_new
            break
        P = P_new
    else:
        raise ArithmeticError("Riccati iteration did not converge")
    BtP = B.T @ P
    K = gamma * np.linalg.solve(R + gamma * BtP @ B, BtP @ A)
    return P, K


def lqr_optimal_return(env: LQR, gamma: float) -> float:
    """Expected infinite-horizon discounted return of the optimal unclipped controller."""
    P, _ = lqr_riccati(env, gamma)
    mu = env.start_mean
    return float(-(mu @ P @ mu + env.start_std**2 * np.trace(P)))
