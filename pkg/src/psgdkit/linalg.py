"""Small dense and structured matrix algebra underpinning the preconditioners.

All routines operate on float64 numpy arrays. Triangular matrices are kept as
full square arrays; only the relevant triangle is meaningful and the diagonal
must stay strictly positive (that is what keeps the factors on their group).
"""

from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ContractViolationError, NumericEvaluationError, NumericInputError

__all__ = [
    "SymEigResult",
    "kron_matvec",
    "max_norm",
    "sym_eig",
    "tri_solve",
    "triu_project",
]


def max_norm(a) -> float:
    """Max-norm (largest absolute entry) of a vector or matrix."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def triu_project(m: np.ndarray) -> np.ndarray:
    """Zero the strictly-lower triangle of a square matrix.

    Used to restrict a symmetric relative gradient to the Lie algebra of the
    upper-triangular group before a multiplicative update.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractViolationError(f"expected a square matrix, got shape {m.shape}")
    return np.triu(m)


def tri_solve(t: np.ndarray, b: np.ndarray, lower: bool = False,
              transpose: bool = False) -> np.ndarray:
    """Solve T x = b (or T^T x = b) for a triangular T with positive diagonal.

    ``b`` may be a vector or a matrix of stacked right-hand sides.
    """
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ContractViolationError(f"triangular factor must be square, got {t.shape}")
    if b.shape[0] != t.shape[0]:
        raise ContractViolationError(
            f"dimension mismatch: factor is {t.shape[0]}, rhs has leading {b.shape[0]}")
    if not (np.isfinite(t).all() and np.isfinite(b).all()):
        raise NumericInputError("non-finite entries in triangular solve input")
    if np.any(np.diag(t) <= 0.0):
        raise ContractViolationError("triangular factor requires a strictly positive diagonal")
    return solve_triangular(t, b, lower=lower, trans=1 if transpose else 0,
                            check_finite=False)


def kron_matvec(q2: np.ndarray, q1: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Apply the Kronecker operator kron(Q2, Q1) to a matricized vector.

    Returns Q1 @ G @ Q2^T, which equals kron(Q2, Q1) @ vec(G) under the
    column-major vec convention, without ever materializing the product.
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.ndim != 2:
        raise ContractViolationError(f"G must be a matrix, got ndim {g.ndim}")
    m, n = g.shape
    if q1.shape != (m, m) or q2.shape != (n, n):
        raise ContractViolationError(
            f"factor shapes {q1.shape}, {q2.shape} do not match G {g.shape}")
    return q1 @ g @ q2.T


class SymEigResult(NamedTuple):
    eigenvalues: np.ndarray   # sorted ascending
    eigenvectors: np.ndarray  # orthonormal columns, S = V diag(w) V^T


def sym_eig(s: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> SymEigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol`` times the Frobenius norm of the input.
    """
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractViolationError(f"expected a square matrix, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise NumericInputError("non-finite entries in symmetric eigensolver input")
    scale = max_norm(s)
    if scale > 0.0 and max_norm(s - s.T) > 1e-10 * scale:
        raise ContractViolationError("input matrix is not symmetric within 1e-10 relative")

    n = s.shape[0]
    b = 0.5 * (s + s.T)
    v = np.eye(n)
    if n == 1:
        return SymEigResult(np.array([b[0, 0]]), v)

    target = tol * np.linalg.norm(b, "fro")
    for _ in range(max_sweeps):
        hollow = b.copy()
        np.fill_diagonal(hollow, 0.0)
        if np.linalg.norm(hollow, "fro") <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = b[p, q]
                if apq == 0.0:
                    continue
                small = 100.0 * abs(apq)
                if abs(b[p, p]) + small == abs(b[p, p]) and abs(b[q, q]) + small == abs(b[q, q]):
                    # negligible against the diagonal; annihilate directly
                    b[p, q] = b[q, p] = 0.0
                    continue
                diff = b[q, q] - b[p, p]
                if abs(diff) + small == abs(diff):
                    t = apq / diff
                else:
                    tau = 0.5 * diff / apq
                    t = np.sign(tau) / (abs(tau) + np.hypot(tau, 1.0)) if tau != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # B <- J^T B J and V <- V J with the (p, q) plane rotation J
                bp, bq = b[:, p].copy(), b[:, q].copy()
                b[:, p] = c * bp - sn * bq
                b[:, q] = sn * bp + c * bq
                bp, bq = b[p, :].copy(), b[q, :].copy()
                b[p, :] = c * bp - sn * bq
                b[q, :] = sn * bp + c * bq
                b[p, q] = b[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    else:
        raise NumericEvaluationError("Jacobi sweeps did not converge")

    w = np.diag(b).copy()
    order = np.argsort(w)
    return SymEigResult(w[order], v[:, order])
