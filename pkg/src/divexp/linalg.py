"""Dense and matrix-free linear algebra.

Operators are plain callables ``v -> A @ v``. The conjugate-gradient solver
keeps every search direction it generates so callers can reuse them as
mutually conjugate vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LinearOperator = Callable[[np.ndarray], np.ndarray]


class NumericError(ArithmeticError):
    """Raised when an iteration produces NaN or Inf."""


def as_operator(matrix: np.ndarray) -> LinearOperator:
    matrix = np.asarray(matrix, dtype=float)

    def apply(v: np.ndarray) -> np.ndarray:
        return matrix @ v

    apply.dim = matrix.shape[0]  # type: ignore[attr-defined]
    return apply


def damped(apply_A: LinearOperator, damping: float) -> LinearOperator:
    """Return ``v -> A v + damping * v``."""
    if damping == 0.0:
        return apply_A

    def apply(v: np.ndarray) -> np.ndarray:
        return apply_A(v) + damping * v

    return apply


@dataclass
class CgResult:
    solution: np.ndarray
    directions: list[np.ndarray] = field(default_factory=list)
    residual_norm: float = 0.0
    iterations: int = 0
    converged: bool = False


def cg_solve(apply_A: LinearOperator, b: np.ndarray, max_iters: int = 20, tol: float = 1e-6,
             reorthogonalize: bool = True) -> CgResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops once ``||A x - b|| / ||b|| <= tol`` or after ``max_iters`` steps.
    The search directions ``p_1 .. p_m`` are returned in generation order,
    unnormalized. With ``reorthogonalize`` each new direction is
    A-orthogonalized against all earlier ones (conjugate Gram-Schmidt). In
    exact arithmetic this changes nothing; in floating point it keeps the
    directions conjugate.
    """
    b = np.asarray(b, dtype=float)
    b_norm = float(np.linalg.norm(b))
    if not np.isfinite(b_norm):
        raise NumericError("right-hand side is not finite")
    if b_norm == 0.0:
        raise ValueError("cg_solve needs a nonzero right-hand side; skip the update instead")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    directions: list[np.ndarray] = []
    images: list[np.ndarray] = []
    curvatures: list[float] = []
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or not np.all(np.isfinite(Ap)):
            raise NumericError(f"non-finite operator output at CG iteration {it}")
        if pAp <= 0.0:
            raise NumericError(f"operator is not positive definite along direction {it} (p'Ap={pAp:.3e})")
        directions.append(p.copy())
        alpha = float(r @ p) / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericError(f"non-finite residual at CG iteration {it}")
        if math.sqrt(rr_new) <= tol * b_norm:
            rr = rr_new
            converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
        if reorthogonalize:
            images.append(Ap)
            curvatures.append(pAp)
            for d, Ad, c in zip(directions, images, curvatures):
                p = p - (float(p @ Ad) / c) * d
    return CgResult(solution=x, directions=directions, residual_norm=math.sqrt(rr), iterations=it, converged=converged)


def quad_form(apply_A: LinearOperator, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    Ax = np.asarray(apply_A(x), dtype=float)
    if Ax.shape != x.shape:
        raise ValueError(f"dimension mismatch: operator returned {Ax.shape} for input {x.shape}")
    return float(x @ Ax)


def conjugacy_check(directions: list[np.ndarray], apply_A: LinearOperator) -> float:
    """Worst normalized conjugacy violation among ``directions``.

    Returns ``max_{i != j} |m_i' A m_j| / sqrt(m_i' A m_i * m_j' A m_j)``:
    zero for exactly conjugate vectors and one for parallel ones.
    """
    if len(directions) < 2:
        raise ValueError("need at least two directions")
    D = np.stack([np.asarray(d, dtype=float) for d in directions])
    if np.any(np.linalg.norm(D, axis=1) == 0.0):
        raise ValueError("zero-length direction")
    AD = apply_A.matmat(D) if hasattr(apply_A, "matmat") else np.stack([apply_A(d) for d in D])
    G = D @ AD.T
    G = 0.5 * (G + G.T)
    diag = np.diag(G)
    if np.any(diag <= 0.0):
        raise ValueError("direction with non-positive A-norm")
    scale = np.sqrt(np.outer(diag, diag))
    C = np.abs(G) / scale
    np.fill_diagonal(C, 0.0)
    return float(C.max())


def sym_eig(A: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a dense symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and orthonormal eigenvectors as
    the columns of the second array.
    """
    A = np.array(A, dtype=float, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    n = A.shape[0]
    scale = max(float(np.abs(A).max()), 1e-300) if n else 1.0
    if np.abs(A - A.T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    fro = float(np.linalg.norm(A))
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * fro or fro == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J' A J with J the (p, q) plane rotation
                ap = A[:, p].copy()
                aq = A[:, q]
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :]
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise NumericError("Jacobi iteration did not converge")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]
