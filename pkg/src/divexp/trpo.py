"""KL-constrained natural-gradient updates and the diverse-exploration loop.

Each iteration samples the main policy and its ``k`` perturbed copies,
fits a shared value baseline, averages the per-policy gradients, takes one
trust-region step, and rebuilds the perturbation set around the new main
policy: from the step's CG directions (``DE``), from Gaussian draws
(``RP``), or not at all (``TRPO``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .envs import Env, Trajectory, collect
from .estimation import (
    PerPolicyGradient,
    ValueFunction,
    advantages,
    cov_trace,
    discounted_returns,
    perturbed_gradient,
    score_weighted_sum,
    standardize,
)
from .linalg import CgResult, NumericError, cg_solve, conjugacy_check
from .perturbation import (
    PerturbationSet,
    RadiusSchedule,
    conjugate_set,
    gram,
    pairwise_exact_kl_total,
    pairwise_kl_total,
    radius_at,
    random_set,
    zero_set,
)
from .policy import FisherOperator, GaussianMlpPolicy, exact_gaussian_kl, kl_quadratic

log = logging.getLogger(__name__)

STRATEGIES = ("DE", "RP", "TRPO")
MAX_LOG_RATIO = 20.0
RADIUS_RTOL = 1e-6
EXACT_KL_STATES = 1000


class RadiusViolation(AssertionError):
    pass


@dataclass
class TrpoConfig:
    max_kl: float = 0.01
    cg_iters: int = 20
    cg_damping: float = 1e-3
    cg_tol: float = 1e-6
    backtrack_coef: float = 0.5
    max_backtracks: int = 10
    fisher: str = "empirical"
    # also require the sample-mean exact KL of a candidate to respect the bound
    exact_kl_check: bool = True

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ValueError("trpo.max_kl must be positive")
        if self.cg_iters < 1 or self.max_backtracks < 0:
            raise ValueError("trpo.cg_iters must be positive and trpo.max_backtracks non-negative")
        if self.cg_damping < 0:
            raise ValueError("trpo.cg_damping must be non-negative")
        if not 0 < self.backtrack_coef < 1:
            raise ValueError("trpo.backtrack_coef must lie in (0, 1)")
        if self.fisher not in ("empirical", "expected"):
            raise ValueError("trpo.fisher must be 'empirical' or 'expected'")


@dataclass
class DeConfig:
    strategy: str = "DE"
    k: int = 20
    total_steps: int = 4200
    iterations: int = 150
    delta_p: float = 0.2
    delta_p_floor: float = 0.01  # fraction of the initial radius
    gamma: float = 0.99
    vf_epochs: int = 5
    vf_lr: float = 1e-2
    vf_batch: int = 64

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"de.strategy must be one of {STRATEGIES}")
        if self.strategy == "TRPO":
            self.k = 0
        if self.k < 0 or self.k % 2:
            raise ValueError(f"de.k={self.k}: symmetric sampling needs an even, non-negative k")
        if self.total_steps < self.k + 1:
            raise ValueError("de.total_steps must give every policy at least one step")
        if self.iterations < 0:
            raise ValueError("de.iterations must be non-negative")
        if self.delta_p < 0 or not 0 <= self.delta_p_floor <= 1:
            raise ValueError("de.delta_p must be >= 0 and de.delta_p_floor in [0, 1]")
        if self.k and self.delta_p <= 0:
            raise ValueError("de.delta_p must be positive when k > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("de.gamma must lie in (0, 1]")

    @property
    def beta_k(self) -> int:
        """Steps per perturbed policy: ``floor(N / (k+1))``."""
        return self.total_steps // (self.k + 1) if self.k else 0

    @property
    def beta(self) -> int:
        """Steps for the main policy; it absorbs the remainder of ``N``."""
        return self.total_steps - self.k * self.beta_k

    def schedule(self) -> RadiusSchedule:
        return RadiusSchedule(self.delta_p, self.iterations, self.delta_p * self.delta_p_floor)


@dataclass
class IterationRecord:
    iteration: int
    avg_return: float
    main_return: float
    pairwise_kl: float
    cov_trace: float
    delta_p: float
    step_kl: float
    surrogate_improvement: float
    env_steps: int
    pairwise_kl_exact: float = math.nan
    next_delta_p: float = math.nan
    radius_error: float = math.nan
    conjugacy: float = math.nan
    cg_iterations: int = 0
    backtracks: int = -1
    accepted: int = 0
    ratio_clamped: int = 0
    value_loss: float = math.nan
    step_kl_exact: float = math.nan
    tag_returns: dict = field(default_factory=dict, repr=False)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "tag_returns"]

    def row(self) -> dict:
        d = asdict(self)
        d.pop("tag_returns")
        return d


@dataclass
class SampleBatch:
    """Flattened samples of one iteration, grouped by generating policy."""

    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    offsets: np.ndarray  # (groups, n) parameter offset of each generating policy
    tags: list[int]
    groups: list[np.ndarray]  # sample indices per group
    weights: np.ndarray  # per-sample weight 1 / (groups * trajectories_in_group)
    logp_gen: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def build_batch(policy: GaussianMlpPolicy, flat: np.ndarray, trajectories: list[Trajectory], advs: list[np.ndarray],
                offsets: np.ndarray, tags: list[int]) -> SampleBatch:
    tag_index = {t: i for i, t in enumerate(tags)}
    states = np.concatenate([tr.states for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    adv = np.concatenate(advs)
    owner = np.concatenate([np.full(len(tr), tag_index[tr.tag]) for tr in trajectories])
    n_traj = np.bincount([tag_index[tr.tag] for tr in trajectories], minlength=len(tags))
    if np.any(n_traj == 0):
        raise ValueError("every policy in the set needs at least one trajectory")
    groups = [np.flatnonzero(owner == g) for g in range(len(tags))]
    weights = 1.0 / (len(tags) * n_traj[owner])
    logp = np.empty(len(states))
    for g, idx in enumerate(groups):
        logp[idx] = policy.log_prob(states[idx], actions[idx], flat + offsets[g])
    return SampleBatch(states, actions, adv, offsets, list(tags), groups, weights, logp)


def surrogate(policy: GaussianMlpPolicy, flat_new: np.ndarray, batch: SampleBatch) -> tuple[float, bool]:
    """Importance-weighted advantage objective of candidate main parameters ``flat_new``.

    Each sample's ratio compares the candidate, shifted by the sample's
    perturbation, against the policy that generated it; weights match
    :func:`perturbed_gradient`, so the gradient at the current parameters is
    the perturbed gradient estimate. Log-ratios above 20 are clamped and
    flagged.
    """
    total = 0.0
    clamped = False
    for g, idx in enumerate(batch.groups):
        lp = policy.log_prob(batch.states[idx], batch.actions[idx], flat_new + batch.offsets[g])
        lr = lp - batch.logp_gen[idx]
        if lr.max(initial=-np.inf) > MAX_LOG_RATIO:
            clamped = True
            lr = np.minimum(lr, MAX_LOG_RATIO)
        total += float(np.sum(batch.weights[idx] * np.exp(lr) * batch.advantages[idx]))
    return total, clamped


def batch_gradients(policy: GaussianMlpPolicy, flat: np.ndarray, batch: SampleBatch) -> list[PerPolicyGradient]:
    """Per-policy gradients ``(1/N_traj) sum score * A`` at each generating parameterization."""
    out = []
    k1 = len(batch.tags)
    for g, idx in enumerate(batch.groups):
        w = batch.weights[idx] * k1  # = 1 / N_traj for this group
        gsum = score_weighted_sum(policy, flat + batch.offsets[g], batch.states[idx], batch.actions[idx],
                                  w * batch.advantages[idx])
        out.append(PerPolicyGradient(batch.tags[g], gsum, len(idx), int(round(1.0 / w[0])) if len(idx) else 0))
    return out


@dataclass
class StepResult:
    params: np.ndarray
    accepted: bool
    step_kl: float
    improvement: float
    backtracks: int
    cg: CgResult | None
    ratio_clamped: bool = False
    reason: str = ""
    exact_kl: float = math.nan


def trpo_step(policy: GaussianMlpPolicy, flat: np.ndarray, batch: SampleBatch, grad: np.ndarray,
              F: FisherOperator, config: TrpoConfig) -> StepResult:
    """Natural-gradient step scaled to the KL bound, then backtracking line search.

    A candidate is accepted when it improves the surrogate and its quadratic
    KL is within the bound; with ``config.exact_kl_check`` the mean exact
    Gaussian KL over the batch states must be within the bound as well.
    Returns the old parameters unchanged when no candidate both improves the
    surrogate and satisfies the quadratic KL bound.
    """
    if not np.any(grad):
        return StepResult(flat, False, 0.0, 0.0, -1, None, reason="zero gradient")
    try:
        cg = cg_solve(F.with_damping(config.cg_damping), grad, config.cg_iters, config.cg_tol)
    except NumericError as exc:
        log.warning("CG failed, skipping update: %s", exc)
        return StepResult(flat, False, 0.0, 0.0, -1, None, reason=f"cg failure: {exc}")
    x = cg.solution
    shs = 2.0 * kl_quadratic(F, x)
    if not shs > 0:
        return StepResult(flat, False, 0.0, 0.0, -1, cg, reason="step has no curvature")
    full = x * math.sqrt(2.0 * config.max_kl / shs)
    base, _ = surrogate(policy, flat, batch)
    clamped_any = False
    for j in range(config.max_backtracks + 1):
        step = full * config.backtrack_coef**j
        kl = kl_quadratic(F, step)
        candidate = flat + step
        value, clamped = surrogate(policy, candidate, batch)
        clamped_any |= clamped
        improvement = value - base
        if not (improvement > 0 and kl <= config.max_kl * (1.0 + 1e-9)):
            continue
        exact = exact_gaussian_kl(policy, flat, candidate, batch.states)
        if config.exact_kl_check and exact > config.max_kl:
            continue
        assert kl <= config.max_kl + 1e-8, "accepted step violates the KL bound"
        return StepResult(candidate, True, kl, improvement, j, cg, clamped_any, exact_kl=exact)
    log.info("line search rejected all %d candidates; keeping parameters", config.max_backtracks + 1)
    return StepResult(flat, False, 0.0, 0.0, config.max_backtracks + 1, cg, clamped_any, "line search failed")


def _policy_return(trajs: list[Trajectory], horizon: int) -> float:
    full = [tr.total_reward for tr in trajs if not tr.truncated]
    if full:
        return float(np.mean(full))
    steps = sum(len(tr) for tr in trajs)
    return float(sum(tr.total_reward for tr in trajs) / max(steps, 1) * horizon)


def check_radius(pset: PerturbationSet, F: FisherOperator, rtol: float = RADIUS_RTOL) -> float:
    """Largest relative deviation of a member's quadratic KL from the set radius; raises past ``rtol``."""
    if pset.kind == "zero" or pset.k == 0:
        return 0.0
    kl = 0.5 * np.diag(gram(pset.directions, F))
    err = float(np.max(np.abs(kl - pset.radius)) / pset.radius)
    if err > rtol:
        raise RadiusViolation(f"perturbation radius off by {err:.3e} (relative) at delta_p={pset.radius}")
    return err


class DiverseExploration:
    """Stateful trainer: one call to :meth:`iterate` is one outer-loop iteration."""

    def __init__(self, env: Env, de: DeConfig, trpo: TrpoConfig | None = None, seed: int = 0,
                 hidden=(32, 32), layer_norm: bool = True, log_std_bounds=(-2.5, -0.5), init_log_std: float = -1.0,
                 value_hidden=(32, 32)):
        self.env = env
        self.de = de
        self.trpo = trpo if trpo is not None else TrpoConfig()
        if de.k // 2 > self.trpo.cg_iters and de.strategy == "DE":
            raise ValueError(f"k={de.k} needs at least {de.k // 2} CG iterations (trpo.cg_iters={self.trpo.cg_iters})")
        ss = np.random.SeedSequence(seed)
        init_ss, roll_ss, fisher_ss, value_ss, pert_ss = ss.spawn(5)
        self.policy = GaussianMlpPolicy(env.obs_dim, env.act_dim, hidden, layer_norm, log_std_bounds, init_log_std,
                                        rng=np.random.default_rng(init_ss))
        self.value_fn = ValueFunction(env.obs_dim, value_hidden, rng=np.random.default_rng(init_ss.spawn(1)[0]))
        self.rollout_rng = np.random.default_rng(roll_ss)
        self.fisher_rng = np.random.default_rng(fisher_ss)
        self.value_rng = np.random.default_rng(value_ss)
        self.perturb_rng = np.random.default_rng(pert_ss)
        self.schedule = de.schedule()
        self.pset = zero_set(self.policy.n_params, de.k)
        self.iteration = 0

    @property
    def flat(self) -> np.ndarray:
        return self.policy.get_flat()

    def iterate(self) -> IterationRecord:
        de, env, policy = self.de, self.env, self.policy
        flat = policy.get_flat()
        pset = self.pset
        tags = [0] + pset.tags
        offsets = np.vstack([np.zeros((1, policy.n_params)), pset.directions])
        budgets = [de.beta] + [de.beta_k] * pset.k

        trajs = collect(env, policy, flat + offsets, budgets, tags, self.rollout_rng)
        env_steps = sum(len(tr) for tr in trajs)

        self.value_fn.fit(
            np.concatenate([tr.states for tr in trajs]),
            np.concatenate([discounted_returns(tr.rewards, de.gamma) for tr in trajs]),
            epochs=de.vf_epochs, lr=de.vf_lr, batch_size=de.vf_batch, rng=self.value_rng,
        )
        raw = [advantages(tr, self.value_fn, de.gamma) for tr in trajs]
        flat_adv = standardize(np.concatenate(raw))
        split = np.cumsum([len(a) for a in raw])[:-1]
        advs = np.split(flat_adv, split)

        batch = build_batch(policy, flat, trajs, advs, offsets, tags)
        per_policy = batch_gradients(policy, flat, batch)
        grad = perturbed_gradient(per_policy)
        ctrace = cov_trace(per_policy) if len(per_policy) >= 2 else math.nan

        F = policy.fisher(batch.states, rng=self.fisher_rng, kind=self.trpo.fisher)
        if pset.k >= 2 and pset.kind != "zero":
            pkl = pairwise_kl_total(pset, F)
            pkl_exact = pairwise_exact_kl_total(policy, flat, pset, batch.states, EXACT_KL_STATES)
        elif pset.k >= 2:
            pkl, pkl_exact = 0.0, 0.0
        else:
            pkl, pkl_exact = math.nan, math.nan

        step = trpo_step(policy, flat, batch, grad, F, self.trpo)
        policy.set_flat(step.params)

        next_radius = radius_at(self.schedule, self.iteration)
        new_set = self._next_set(step, F, next_radius)
        radius_error = check_radius(new_set, F)
        conj = math.nan
        if step.cg is not None and len(step.cg.directions) >= 2:
            m = max(2, de.k // 2)
            conj = conjugacy_check(step.cg.directions[:m], F.with_damping(self.trpo.cg_damping))

        by_tag: dict[int, list[Trajectory]] = {}
        for tr in trajs:
            by_tag.setdefault(tr.tag, []).append(tr)
        tag_returns = {t: _policy_return(by_tag[t], env.horizon) for t in tags}
        record = IterationRecord(
            iteration=self.iteration,
            avg_return=float(np.mean([tag_returns[t] for t in tags])),
            main_return=tag_returns[0],
            pairwise_kl=pkl,
            cov_trace=ctrace,
            delta_p=pset.radius if pset.k else math.nan,
            step_kl=step.step_kl,
            surrogate_improvement=step.improvement,
            env_steps=env_steps,
            pairwise_kl_exact=pkl_exact,
            next_delta_p=new_set.radius if new_set.k else math.nan,
            radius_error=radius_error if new_set.k else math.nan,
            conjugacy=conj,
            cg_iterations=step.cg.iterations if step.cg is not None else 0,
            backtracks=step.backtracks,
            accepted=int(step.accepted),
            ratio_clamped=int(step.ratio_clamped),
            value_loss=self.value_fn.loss_history[-1],
            step_kl_exact=step.exact_kl,
            tag_returns=tag_returns,
        )
        self.pset = new_set
        self.iteration += 1
        return record

    def _next_set(self, step: StepResult, F: FisherOperator, radius: float) -> PerturbationSet:
        de = self.de
        if de.k == 0:
            return self.pset
        if de.strategy == "RP":
            return random_set(self.policy.n_params, de.k, F, radius, self.perturb_rng)
        if step.cg is None:
            log.warning("no CG directions this iteration (%s); reusing the previous perturbation set", step.reason)
            return self.pset
        return conjugate_set(step.cg.directions, de.k, F, radius)


def de_iteration(trainer: DiverseExploration) -> IterationRecord:
    return trainer.iterate()


def run(env: Env, de: DeConfig, trpo: TrpoConfig | None = None, seed: int = 0, callback=None,
        **policy_kwargs) -> list[IterationRecord]:
    """Train for ``de.iterations`` iterations from a seeded initial policy."""
    trainer = DiverseExploration(env, de, trpo, seed, **policy_kwargs)
    records = []
    for _ in range(de.iterations):
        rec = trainer.iterate()
        records.append(rec)
        if callback is not None:
            callback(rec)
    return records
