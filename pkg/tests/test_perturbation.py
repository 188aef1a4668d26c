import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divexp.linalg import as_operator, cg_solve
from divexp.oracles import random_spd
from divexp.perturbation import (
    NearNullDirection,
    PerturbationSet,
    RadiusSchedule,
    brute_force_best_set,
    candidate_coefficients,
    conjugate_set,
    gram,
    pairwise_exact_kl_total,
    pairwise_kl_total,
    radius_at,
    random_set,
    scale_to_exact_radius,
    scale_to_radius,
    theorem1_objective,
    theorem1_oracle,
    zero_set,
)
from divexp.policy import GaussianMlpPolicy, exact_gaussian_kl, kl_quadratic

I2 = as_operator(np.eye(2))


def test_scale_to_radius_examples():
    np.testing.assert_allclose(scale_to_radius(np.array([1.0, 0.0]), I2, 0.5), [1.0, 0.0])
    np.testing.assert_allclose(scale_to_radius(np.array([2.0, 0.0]), I2, 0.5), [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 15), st.floats(1e-4, 5.0), st.integers(0, 2**31 - 1))
def test_scale_to_radius_exact(n, delta, seed):
    rng = np.random.default_rng(seed)
    F = as_operator(random_spd(n, rng))
    eps = scale_to_radius(rng.standard_normal(n), F, delta)
    assert kl_quadratic(F, eps) == pytest.approx(delta, rel=1e-10)


def test_scale_to_radius_errors():
    with pytest.raises(ValueError):
        scale_to_radius(np.zeros(2), I2, 0.1)
    with pytest.raises(ValueError):
        scale_to_radius(np.ones(2), I2, 0.0)
    with pytest.raises(NearNullDirection):
        scale_to_radius(np.array([0.0, 1.0]), as_operator(np.diag([1.0, 0.0])), 0.1)


def cg_dirs(A, rng, iters=None):
    n = A.shape[0]
    return cg_solve(as_operator(A), rng.standard_normal(n), max_iters=iters or n, tol=1e-14).directions


def test_conjugate_set_k2():
    mu = np.array([3.0, 4.0])
    s = conjugate_set([mu], 2, I2, 0.5)
    np.testing.assert_allclose(s.directions, [[0.6, 0.8], [-0.6, -0.8]])
    assert s.tags == [1, -1]
    assert s.kind == "conjugate"


def test_conjugate_set_cross_terms():
    rng = np.random.default_rng(0)
    A = random_spd(8, rng)
    delta = 0.3
    s = conjugate_set(cg_dirs(A, rng), 8, as_operator(A), delta)
    G = s.directions @ A @ s.directions.T
    for i, j in itertools.combinations(range(s.k), 2):
        if j == i + 1 and i % 2 == 0:
            assert G[i, j] == pytest.approx(-2 * delta, rel=1e-8)
        else:
            assert abs(G[i, j]) <= 1e-4 * 2 * delta
    assert pairwise_kl_total(s, as_operator(A)) == pytest.approx(8**2 * delta, rel=1e-8)


def test_conjugate_set_k4_total_is_16_delta():
    rng = np.random.default_rng(1)
    A = random_spd(6, rng)
    delta = 0.2
    s = conjugate_set(cg_dirs(A, rng), 4, as_operator(A), delta)
    assert pairwise_kl_total(s, as_operator(A)) == pytest.approx(16 * delta, rel=1e-8)


def test_conjugate_set_isotropic_norms():
    Q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((5, 5)))
    s = conjugate_set(list(Q.T), 6, as_operator(np.eye(5)), 0.125)
    np.testing.assert_allclose(np.linalg.norm(s.directions, axis=1), math.sqrt(0.25), rtol=1e-12)


def test_conjugate_set_errors():
    with pytest.raises(ValueError, match="CG iteration"):
        conjugate_set([np.ones(2)], 4, I2, 0.1)
    with pytest.raises(ValueError):
        conjugate_set([np.ones(2), np.array([1.0, -1.0])], 3, I2, 0.1)


def test_conjugate_set_takes_first_directions():
    dirs = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    s = conjugate_set(dirs, 4, as_operator(np.eye(3)), 0.5)
    np.testing.assert_allclose(s.directions[::2], [[1, 0, 0], [0, 1, 0]])


def test_random_set_radius_and_symmetry():
    rng = np.random.default_rng(3)
    A = random_spd(10, rng)
    s = random_set(10, 6, as_operator(A), 0.05, rng)
    for i, d in enumerate(s.directions):
        assert kl_quadratic(as_operator(A), d) == pytest.approx(0.05, rel=1e-6)
        if i % 2 == 0:
            np.testing.assert_array_equal(s.directions[i + 1], -d)
    assert s.kind == "random"


def test_random_set_seeded():
    A = as_operator(np.eye(4))
    a = random_set(4, 4, A, 0.1, np.random.default_rng(8))
    b = random_set(4, 4, A, 0.1, np.random.default_rng(8))
    assert a.directions.tobytes() == b.directions.tobytes()


def test_random_set_cross_inner_products_vanish_on_average():
    n = 200
    rng = np.random.default_rng(4)
    F = as_operator(np.diag(np.linspace(1, 3, n)))
    vals = []
    for _ in range(1000):
        s = random_set(n, 4, F, 0.5, rng)
        vals.append(float(s.directions[0] @ F(s.directions[2])))
    vals = np.array(vals)
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / math.sqrt(len(vals))


def test_random_set_null_operator_fails():
    with pytest.raises(NearNullDirection):
        random_set(3, 2, as_operator(np.zeros((3, 3))), 0.1, np.random.default_rng(0))


def test_zero_set():
    s = zero_set(5, 4)
    assert s.k == 4 and not np.any(s.directions)
    assert zero_set(5, 0).k == 0
    with pytest.raises(ValueError):
        zero_set(5, 3)


def test_set_rejects_non_finite():
    with pytest.raises(ValueError):
        PerturbationSet(np.array([[np.nan, 0.0]]), 0.1, "random")


def test_pairwise_kl_pair():
    eps = scale_to_radius(np.array([1.0, 2.0]), as_operator(np.diag([2.0, 1.0])), 0.07)
    s = PerturbationSet(np.stack([eps, -eps]), 0.07, "conjugate")
    assert pairwise_kl_total(s, as_operator(np.diag([2.0, 1.0]))) == pytest.approx(4 * 0.07, rel=1e-12)
    with pytest.raises(ValueError):
        pairwise_kl_total(np.ones((1, 2)), I2)


def test_pairwise_kl_matches_naive_double_sum():
    rng = np.random.default_rng(5)
    A = random_spd(6, rng)
    D = rng.standard_normal((5, 6))
    naive = sum(0.5 * (D[i] - D[j]) @ A @ (D[i] - D[j]) for i, j in itertools.combinations(range(5), 2))
    assert pairwise_kl_total(D, as_operator(A)) == pytest.approx(naive, rel=1e-12)


def test_conjugate_dominates_random():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        A = random_spd(n, rng)
        k = 2 * int(rng.integers(1, n // 2 + 1))
        op = as_operator(A)
        conj = pairwise_kl_total(conjugate_set(cg_dirs(A, rng), k, op, 0.1), op)
        rand = pairwise_kl_total(random_set(n, k, op, 0.1, rng), op)
        assert conj >= rand * (1 - 1e-8)


def test_equal_radius_conjugate_bases_tie():
    rng = np.random.default_rng(7)
    A = random_spd(7, rng)
    op = as_operator(A)
    a = pairwise_kl_total(conjugate_set(cg_dirs(A, rng), 6, op, 0.2), op)
    _, U = np.linalg.eigh(A)
    b = pairwise_kl_total(conjugate_set(list(U.T), 6, op, 0.2), op)
    assert a == pytest.approx(b, abs=1e-8)


def test_exact_pairwise_kl_close_to_quadratic_for_small_radius():
    pol = GaussianMlpPolicy(3, 2, (8,), rng=np.random.default_rng(0))
    states = np.random.default_rng(1).standard_normal((400, 3))
    F = pol.fisher(states, kind="expected")
    s = random_set(pol.n_params, 4, F, 1e-4, np.random.default_rng(2))
    quad = pairwise_kl_total(s, F)
    exact = pairwise_exact_kl_total(pol, pol.get_flat(), s, states)
    assert exact == pytest.approx(quad, rel=0.05)


def test_scale_to_exact_radius():
    pol = GaussianMlpPolicy(2, 1, (4,), rng=np.random.default_rng(0))
    states = np.random.default_rng(1).standard_normal((50, 2))
    flat = pol.get_flat()
    eps = scale_to_exact_radius(pol, flat, np.random.default_rng(2).standard_normal(pol.n_params), states, 0.05)
    assert exact_gaussian_kl(pol, flat, flat + eps, states) == pytest.approx(0.05, rel=1e-8)


def test_radius_schedule_examples():
    s = RadiusSchedule(0.2, 100)
    assert radius_at(s, 0) == 0.2
    assert radius_at(s, 100) == 0.0
    assert radius_at(s, 50) == pytest.approx(0.1)
    assert radius_at(RadiusSchedule(0.2, 100, floor=0.002), 100) == 0.002
    with pytest.raises(ValueError):
        radius_at(s, -1)
    with pytest.raises(ValueError):
        RadiusSchedule(0.1, 10, floor=0.2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 3.0), st.integers(1, 300), st.floats(0.0, 1.0))
def test_radius_schedule_monotone_and_bounded(initial, iters, floor_frac):
    s = RadiusSchedule(initial, iters, floor=initial * floor_frac)
    vals = [s(i) for i in range(iters + 5)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(s.floor <= v <= initial for v in vals)


def test_brute_force_picks_top_basis_pair():
    F = np.diag([3.0, 2.0, 1.0])
    best = brute_force_best_set(F, np.eye(3), 2)
    assert best.pure
    # two candidates from the pool: e1 paired with the next largest contribution
    np.testing.assert_allclose(best.coefficients.max(axis=1), 1.0)
    assert 0 in set(np.argmax(best.coefficients, axis=1))


def test_brute_force_equal_norms_tie():
    F = np.diag([4.0, 1.0, 0.25])
    basis = np.diag([0.5, 1.0, 2.0])  # all F-norms equal to one
    best = brute_force_best_set(F, basis, 3)
    pure_total = pairwise_kl_total(basis, as_operator(F))
    assert best.pure
    assert best.objective == pytest.approx(pure_total, abs=1e-10)
    for perm in itertools.permutations(range(3)):
        assert pairwise_kl_total(basis[list(perm)], as_operator(F)) == pytest.approx(pure_total, abs=1e-10)


def test_brute_force_dominates_random_subsets():
    rng = np.random.default_rng(8)
    A = random_spd(5, rng)
    basis = np.array(cg_dirs(A, rng))
    best = brute_force_best_set(A, basis, 4)
    V = candidate_coefficients(5) @ basis
    for _ in range(10_000):
        idx = rng.choice(len(V), 4, replace=False)
        assert pairwise_kl_total(V[idx], as_operator(A)) <= best.objective * (1 + 1e-12)


def test_brute_force_pool_limit():
    with pytest.raises(ValueError):
        brute_force_best_set(np.eye(10), np.eye(10), 6)


def test_unit_eta_pool_breaks_purity_for_larger_k():
    # With every candidate renormalized to |eta| = 1, mixtures beat the pure basis once k >= 3;
    # the oracle's pool keeps |eta| <= 1 unnormalized, where the pure subset wins.
    F = np.diag([100.0, 1.0, 1.0, 1.0])
    basis = np.eye(4)
    pure_total = pairwise_kl_total(basis, as_operator(F))
    assert pure_total == pytest.approx(154.5)
    coeffs = candidate_coefficients(4)
    unit = coeffs / np.linalg.norm(coeffs, axis=1, keepdims=True)
    G = unit @ F @ unit.T
    d = np.diag(G)
    P = 0.5 * (d[:, None] + d[None, :] - 2 * G)
    best_unit = max(sum(P[a, b] for a, b in itertools.combinations(s, 2))
                    for s in itertools.combinations(range(len(unit)), 4))
    assert best_unit > pure_total + 1.0
    best = brute_force_best_set(F, basis, 4)
    assert best.pure and best.objective == pytest.approx(pure_total)


def test_theorem1_diag_example():
    res = theorem1_oracle(np.diag([5.0, 1.0]), 0.3, rng=np.random.default_rng(0))
    np.testing.assert_allclose(np.abs(res.eps_j), [0.3, 0.0], atol=1e-12)
    np.testing.assert_allclose(res.eps_i, -res.eps_j)
    assert res.objective == pytest.approx(4 * 0.09 * 125, rel=1e-12)
    assert res.analytic == pytest.approx(res.objective, rel=1e-12)
    assert res.dominated


def test_theorem1_isotropic_ties():
    res = theorem1_oracle(2.0 * np.eye(4), 0.5, rng=np.random.default_rng(1))
    assert res.dominated
    assert np.linalg.norm(res.eps_j) == pytest.approx(0.5)
    assert res.objective == pytest.approx(4 * 0.25 * 8)


def test_theorem1_random_10x10():
    rng = np.random.default_rng(9)
    res = theorem1_oracle(random_spd(10, rng), 0.7, rng=rng)
    assert res.dominated
    assert abs(res.objective - res.analytic) <= 1e-8 * res.analytic


def test_theorem1_objective_vectorized():
    F = np.diag([2.0, 1.0])
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(theorem1_objective(F, -X, X), [4 * 8, 4 * 1])


def test_theorem1_monte_carlo_consistency():
    # linear Gaussian policy a ~ N(theta's, 1) with states s ~ N(0, diag(4, 1));
    # the cross-covariance of the two perturbed scores, both evaluated on the same
    # samples from the main policy, should be smallest for the top-eigenvector pair
    rng = np.random.default_rng(10)
    m = 100_000
    s = rng.standard_normal((m, 2)) * np.array([2.0, 1.0])
    noise = rng.standard_normal(m)
    F = np.diag([4.0, 1.0])
    delta = 1.0

    def cross_trace(eps_i, eps_j):
        x = (noise - s @ eps_j)[:, None] * s
        y = (noise - s @ eps_i)[:, None] * s
        prod = np.sum(x * y, axis=1)
        value = prod.mean() - x.mean(axis=0) @ y.mean(axis=0)
        return value, prod.std(ddof=1) / math.sqrt(m)

    res = theorem1_oracle(F, delta, rng=rng)
    eig_value, eig_se = cross_trace(res.eps_i, res.eps_j)
    for _ in range(19):
        a, b = rng.standard_normal((2, 2))
        value, se = cross_trace(delta * a / np.linalg.norm(a), delta * b / np.linalg.norm(b))
        assert eig_value <= value + 3 * math.hypot(eig_se, se)


def test_gram_symmetry():
    rng = np.random.default_rng(11)
    A = random_spd(5, rng)
    D = rng.standard_normal((4, 5))
    G = gram(D, as_operator(A))
    np.testing.assert_allclose(G, D @ A @ D.T, rtol=1e-12)
    assert np.array_equal(G, G.T)
