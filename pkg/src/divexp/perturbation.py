"""Perturbation sets for exploration around a main policy.

A set holds ``k`` parameter offsets arranged as ``eps_1, -eps_1, eps_2,
-eps_2, ...``. Conjugate sets reuse conjugate-gradient search directions,
random sets draw Gaussian directions, and zero sets are exact copies of the
main policy. Every non-zero member is rescaled so its quadratic KL to the
main policy equals the radius ``delta_p``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import LinearOperator, quad_form, sym_eig
from .policy import exact_gaussian_kl, kl_quadratic

NULL_FLOOR = 1e-12


class NearNullDirection(ValueError):
    """The direction has (numerically) no curvature under the Fisher operator."""


@dataclass
class PerturbationSet:
    directions: np.ndarray  # (k, n)
    radius: float
    kind: str  # "conjugate" | "random" | "zero"

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        self.directions = d if d.ndim == 2 else d.reshape(len(d), -1)
        if not np.all(np.isfinite(self.directions)):
            raise ValueError("perturbations must be finite")

    @property
    def k(self) -> int:
        return len(self.directions)

    @property
    def tags(self) -> list[int]:
        """Policy tags ``+1, -1, +2, -2, ...`` in set order."""
        return [(i // 2 + 1) * (1 if i % 2 == 0 else -1) for i in range(self.k)]

    def __iter__(self):
        return iter(self.directions)

    def __len__(self) -> int:
        return self.k


def _check_even(k: int) -> None:
    if k < 0 or k % 2:
        raise ValueError(f"k={k}: symmetric sampling needs an even, non-negative perturbation count")


def _symmetric(dirs: Sequence[np.ndarray]) -> np.ndarray:
    out = []
    for d in dirs:
        out.append(d)
        out.append(-d)
    return np.array(out)


def scale_to_radius(eps: np.ndarray, F: LinearOperator, delta_p: float) -> np.ndarray:
    """Rescale ``eps`` so that ``0.5 (c eps)' F (c eps) = delta_p``.

    Closed-form solution of the radius line search under the quadratic KL model.
    """
    if delta_p <= 0:
        raise ValueError("radius must be positive")
    eps = np.asarray(eps, dtype=float)
    if not np.any(eps):
        raise ValueError("cannot scale a zero direction")
    curv = 2.0 * kl_quadratic(F, eps)
    if not curv > NULL_FLOOR:
        raise NearNullDirection(f"direction curvature {curv:.3e} is below {NULL_FLOOR:g}")
    return eps * math.sqrt(2.0 * delta_p / curv)


def scale_rows_to_radius(D: np.ndarray, F: LinearOperator, delta_p: float) -> np.ndarray:
    """Row-wise :func:`scale_to_radius`, sharing one batched operator application."""
    if delta_p <= 0:
        raise ValueError("radius must be positive")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if not np.all(np.any(D, axis=1)):
        raise ValueError("cannot scale a zero direction")
    curv = np.diag(gram(D, F))
    bad = ~(curv > NULL_FLOOR)
    if np.any(bad):
        raise NearNullDirection(f"direction curvature {curv[bad].min():.3e} is below {NULL_FLOOR:g}")
    return D * np.sqrt(2.0 * delta_p / curv)[:, None]


def scale_to_exact_radius(policy, flat, eps, states, delta_p: float, tol: float = 1e-10, max_iters: int = 200):
    """Bisection on ``c`` so that the exact Gaussian KL of ``flat -> flat + c eps`` equals ``delta_p``."""
    eps = np.asarray(eps, dtype=float)

    def kl(c):
        return exact_gaussian_kl(policy, flat, flat + c * eps, states)

    lo, hi = 0.0, 1.0
    while kl(hi) < delta_p:
        hi *= 2.0
        if hi > 1e12:
            raise NearNullDirection("exact KL never reaches the radius along this direction")
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        if kl(mid) < delta_p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return 0.5 * (lo + hi) * eps


def zero_set(n: int, k: int) -> PerturbationSet:
    """``k`` exact copies of the main policy."""
    _check_even(k)
    return PerturbationSet(np.zeros((k, n)), 0.0, "zero")


def conjugate_set(cg_directions: Sequence[np.ndarray], k: int, F: LinearOperator, delta_p: float) -> PerturbationSet:
    """Radius-scaled first ``k/2`` CG directions, each followed by its negation."""
    _check_even(k)
    if k // 2 > len(cg_directions):
        raise ValueError(
            f"k={k} needs {k // 2} conjugate directions but CG produced {len(cg_directions)}; "
            "raise the CG iteration count"
        )
    if k == 0:
        n = len(cg_directions[0]) if len(cg_directions) else 0
        return PerturbationSet(np.zeros((0, n)), delta_p, "conjugate")
    scaled = scale_rows_to_radius(np.asarray(cg_directions[: k // 2]), F, delta_p)
    return PerturbationSet(_symmetric(scaled), delta_p, "conjugate")


def random_set(n: int, k: int, F: LinearOperator, delta_p: float, rng: np.random.Generator,
               max_attempts: int = 10) -> PerturbationSet:
    """``k/2`` standard-normal directions scaled to the radius, plus negations."""
    _check_even(k)
    if k == 0:
        return PerturbationSet(np.zeros((0, n)), delta_p, "random")
    for attempt in range(max_attempts):
        try:
            scaled = scale_rows_to_radius(rng.standard_normal((k // 2, n)), F, delta_p)
            break
        except NearNullDirection:
            if attempt == max_attempts - 1:
                raise
    return PerturbationSet(_symmetric(scaled), delta_p, "random")


def gram(directions: np.ndarray, F: LinearOperator) -> np.ndarray:
    """``G[i, j] = eps_i' F eps_j`` (damping excluded for Fisher operators)."""
    D = np.atleast_2d(directions)
    if hasattr(F, "matmat"):
        FD = F.matmat(D, damped=False)
    else:
        op = getattr(F, "undamped", F)
        FD = np.stack([op(d) for d in D])
    G = D @ FD.T
    return 0.5 * (G + G.T)


def pairwise_kl_total(pset, F: LinearOperator) -> float:
    """``sum_{i<j} 0.5 (eps_i - eps_j)' F (eps_i - eps_j)`` over the set."""
    D = pset.directions if isinstance(pset, PerturbationSet) else np.atleast_2d(pset)
    if len(D) < 2:
        raise ValueError("need at least two perturbations")
    return _pairwise_from_gram(gram(D, F))


def _pairwise_from_gram(G: np.ndarray) -> float:
    d = np.diag(G)
    P = 0.5 * (d[:, None] + d[None, :] - 2.0 * G)
    return float(np.sum(np.triu(P, 1)))


def pairwise_exact_kl_total(policy, flat: np.ndarray, pset, states: np.ndarray, max_states: int | None = None) -> float:
    """Exact counterpart of :func:`pairwise_kl_total`: ``sum_{i<j} KL(pi_j || pi_i)`` averaged over states.

    ``max_states`` thins the batch to an evenly strided subsample.
    """
    from .policy import gaussian_kl

    D = pset.directions if isinstance(pset, PerturbationSet) else np.atleast_2d(pset)
    if len(D) < 2:
        raise ValueError("need at least two perturbations")
    states = np.atleast_2d(states)
    if max_states is not None and len(states) > max_states:
        states = states[:: -(-len(states) // max_states)]
    mus = np.stack([policy.mean(states, flat + d) for d in D])  # (k, m, da)
    lss = np.stack([policy.log_std(flat + d) for d in D])  # (k, da)
    total = 0.0
    for i in range(len(D) - 1):
        j = slice(i + 1, None)
        kl = gaussian_kl(mus[j], lss[j][:, None, :], mus[i][None], lss[i][None, None, :])
        total += float(kl.mean(axis=1).sum())
    return total


@dataclass
class RadiusSchedule:
    initial: float
    iterations: int
    floor: float = 0.0

    def __post_init__(self):
        if self.initial < 0 or self.floor < 0 or self.floor > self.initial:
            raise ValueError("need 0 <= floor <= initial radius")

    def __call__(self, iteration: int) -> float:
        return radius_at(self, iteration)


def radius_at(schedule: RadiusSchedule, iteration: int) -> float:
    """Linear decay from the initial radius to zero at ``iterations``, floored."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if schedule.iterations <= 0:
        return max(schedule.floor, schedule.initial)
    return max(schedule.floor, schedule.initial * (1.0 - iteration / schedule.iterations))


# --- oracles -----------------------------------------------------------------


@dataclass
class BestSet:
    coefficients: np.ndarray  # (k, n_basis) nonnegative, unit norm rows
    vectors: np.ndarray  # (k, n)
    objective: float
    pure: bool


def candidate_coefficients(n_basis: int, grid: int = 2) -> np.ndarray:
    """Nonzero nonnegative coefficient vectors on ``{0, 1/grid, ..., 1}^n`` with ``|eta| <= 1``."""
    levels = np.arange(grid + 1) / grid
    combos = np.array(list(itertools.product(levels, repeat=n_basis)))
    norms = np.linalg.norm(combos, axis=1)
    return combos[(norms > 0) & (norms <= 1.0 + 1e-12)]


def _is_pure(coeffs: np.ndarray) -> np.ndarray:
    return (np.count_nonzero(coeffs, axis=1) == 1) & np.isclose(coeffs.max(axis=1), 1.0)


def brute_force_best_set(F: np.ndarray, basis: np.ndarray, k: int, grid: int = 2,
                         max_subsets: int = 1_000_000) -> BestSet:
    """Exhaustive maximizer of the pairwise quadratic KL over size-``k`` candidate subsets.

    Candidates are ``sum_i eta_i basis_i`` with nonnegative ``eta`` on a
    coarse grid inside the unit ball. Pure basis vectors come first in the
    candidate order, so exact ties resolve to them.
    """
    F = np.asarray(F, dtype=float)
    basis = np.atleast_2d(np.asarray(basis, dtype=float))
    coeffs = candidate_coefficients(basis.shape[0], grid)
    pure = _is_pure(coeffs)
    order = np.lexsort((np.argmax(coeffs, axis=1), ~pure))
    coeffs = coeffs[order]
    count = math.comb(len(coeffs), k)
    if count > max_subsets:
        raise ValueError(f"{count} candidate subsets exceed the limit of {max_subsets}")
    V = coeffs @ basis
    G = V @ F @ V.T
    d = np.diag(G)
    P = 0.5 * (d[:, None] + d[None, :] - 2.0 * G)
    subsets = np.array(list(itertools.combinations(range(len(coeffs)), k)))
    totals = np.zeros(len(subsets))
    for a, b in itertools.combinations(range(k), 2):
        totals += P[subsets[:, a], subsets[:, b]]
    best = int(np.argmax(totals))
    c = coeffs[subsets[best]]
    return BestSet(c, V[subsets[best]], float(totals[best]), bool(np.all(_is_pure(c))))


def theorem1_objective(F: np.ndarray, eps_i: np.ndarray, eps_j: np.ndarray, eig=None) -> np.ndarray:
    """``sum_k lambda_k^3 (u_k' (eps_j - eps_i))^2``; vectorized over leading axes."""
    lam, U = eig if eig is not None else sym_eig(F)
    proj = (np.asarray(eps_j) - np.asarray(eps_i)) @ U
    return np.sum(lam**3 * proj**2, axis=-1)


@dataclass
class EigenPairResult:
    eps_i: np.ndarray
    eps_j: np.ndarray
    objective: float
    analytic: float
    best_random: float
    dominated: bool


def theorem1_oracle(F: np.ndarray, delta: float, n_random: int = 10_000,
                    rng: np.random.Generator | None = None, slack: float = 1e-8) -> EigenPairResult:
    """Opposite pair along the top eigenvector, checked against random equal-norm pairs."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    F = np.asarray(F, dtype=float)
    lam, U = sym_eig(F)
    u1 = U[:, 0]
    eps_j = delta * u1
    eps_i = -eps_j
    value = float(theorem1_objective(F, eps_i, eps_j, (lam, U)))
    rng = rng if rng is not None else np.random.default_rng(0)
    n = F.shape[0]
    Xi = rng.standard_normal((n_random, n))
    Xj = rng.standard_normal((n_random, n))
    Xi *= delta / np.linalg.norm(Xi, axis=1, keepdims=True)
    Xj *= delta / np.linalg.norm(Xj, axis=1, keepdims=True)
    best_random = float(theorem1_objective(F, Xi, Xj, (lam, U)).max())
    analytic = 4.0 * delta**2 * float(lam[0]) ** 3
    return EigenPairResult(eps_i, eps_j, value, analytic, best_random,
                           dominated=best_random <= value * (1.0 + slack))
