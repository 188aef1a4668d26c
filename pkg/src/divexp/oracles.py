"""Standalone numerical checks of the CG solver and the two diversity results."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_operator, cg_solve, conjugacy_check
from .perturbation import brute_force_best_set, conjugate_set, pairwise_kl_total, random_set, theorem1_oracle


@dataclass
class OracleReport:
    name: str
    trials: int
    failures: int
    seconds: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.trials - self.failures}/{self.trials} trials in {self.seconds:.2f}s"


def random_spd(n: int, rng: np.random.Generator, cond: float = 100.0) -> np.ndarray:
    """Random orthogonal basis with log-uniform eigenvalues in ``[1, cond]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), n))
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T)


def cg_basis(A: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    """Every search direction of a CG run from a random right-hand side."""
    n = A.shape[0]
    return cg_solve(as_operator(A), rng.standard_normal(n), max_iters=n, tol=1e-12).directions


def check_cg(trials: int = 100, max_n: int = 50, rng: np.random.Generator | None = None,
             residual_tol: float = 1e-6, conj_tol: float = 1e-6) -> OracleReport:
    rng = rng if rng is not None else np.random.default_rng(3)
    start = time.perf_counter()
    failures, details = 0, []
    for t in range(trials):
        n = int(rng.integers(2, max_n + 1))
        A = random_spd(n, rng)
        b = rng.standard_normal(n)
        res = cg_solve(as_operator(A), b, max_iters=n, tol=residual_tol)
        rel = np.linalg.norm(b - A @ res.solution) / np.linalg.norm(b)
        conj = conjugacy_check(res.directions, as_operator(A)) if len(res.directions) >= 2 else 0.0
        if not (rel <= residual_tol and res.iterations <= n and conj <= conj_tol):
            failures += 1
            details.append(f"trial {t}: n={n} residual={rel:.2e} iterations={res.iterations} conjugacy={conj:.2e}")
    return OracleReport("cg", trials, failures, time.perf_counter() - start, details)


def check_theorem2(trials: int = 100, ks=(2, 4), rng: np.random.Generator | None = None,
                   slack: float = 1e-8, delta_p: float = 0.1) -> OracleReport:
    """Pure conjugate subsets win the exhaustive search; conjugate sets never trail random ones.

    Dimensions run up to 8 for ``k = 2`` and up to 6 for ``k = 4``, where the
    candidate-subset count stays under the exhaustive-search limit.
    """
    rng = rng if rng is not None else np.random.default_rng(2)
    start = time.perf_counter()
    failures, details, total = 0, [], 0
    for k in ks:
        lo, hi = (2, 8) if k == 2 else (k, 6)
        for t in range(trials):
            total += 1
            n = int(rng.integers(lo, hi + 1))
            A = random_spd(n, rng)
            basis = np.array(cg_basis(A, rng))
            best = brute_force_best_set(A, basis, k)
            op = as_operator(A)
            conj = pairwise_kl_total(conjugate_set(list(basis), k, op, delta_p), op)
            rand = pairwise_kl_total(random_set(n, k, op, delta_p, rng), op)
            dominated = conj >= rand * (1.0 - slack)
            if not (best.pure and dominated):
                failures += 1
                details.append(f"k={k} trial {t}: n={n} pure={best.pure} conjugate={conj:.10g} random={rand:.10g}")
    return OracleReport("theorem2", total, failures, time.perf_counter() - start, details)


def check_theorem1(trials: int = 50, max_n: int = 10, n_random: int = 10_000,
                   rng: np.random.Generator | None = None, slack: float = 1e-8) -> OracleReport:
    rng = rng if rng is not None else np.random.default_rng(1)
    start = time.perf_counter()
    failures, details = 0, []
    for t in range(trials):
        n = int(rng.integers(2, max_n + 1))
        A = random_spd(n, rng)
        delta = float(rng.uniform(0.05, 2.0))
        res = theorem1_oracle(A, delta, n_random, rng, slack)
        rel = abs(res.objective - res.analytic) / res.analytic
        if not (res.dominated and rel <= 1e-8):
            failures += 1
            details.append(f"trial {t}: n={n} best random={res.best_random:.10g} pair={res.objective:.10g} "
                           f"analytic gap={rel:.2e}")
    return OracleReport("theorem1", trials, failures, time.perf_counter() - start, details)


ORACLES = {"cg": check_cg, "theorem1": check_theorem1, "theorem2": check_theorem2}
