"""Five preconditioner families learned on matrix Lie groups, plus direct sums.

Every preconditioner keeps a factored state Q with P = Q^T Q and learns from
tangent pairs (dt, dg) by one relative-gradient step per pair, minimizing

    c(P) = E[ dg^T P dg + dt^T P^{-1} dt ]

whose minimizer whitens the gradient perturbations: P E[dg dg^T] P = E[dt dt^T].
Updates are multiplicative with a step size normalized by the max norm of the
gradient, so triangular factors keep strictly positive diagonals and the state
never leaves its group. Single-sample gradient estimates are used (one pair
per update); the constant factor two of the exact expressions is absorbed by
the normalization.

Conventions: flat slices are matricized column-major, so a Kronecker factor
pair (Q1, Q2) for an (M, N) block acts on vec(G) as vec(Q1 G Q2^T).
"""

import copy

import numpy as np

from .curvature import TangentPair
from .errors import (
    ContractViolationError,
    DegenerateCurvatureError,
    DegenerateStateError,
)
from .linalg import max_norm, tri_solve, triu_project

__all__ = [
    "DensePrecond",
    "DiagPrecond",
    "DirectSumPrecond",
    "KronPrecond",
    "Preconditioner",
    "ScanPrecond",
    "SpluPrecond",
    "closed_form_diagonal",
    "direct_sum_route",
    "estimation_criterion",
    "make_preconditioner",
    "scan_q2_matvec",
    "splu_matvec",
]

# Diagonal entries below this make triangular solves meaningless.
_SOLVE_FLOOR = 1e-300
# Candidate states whose diagonals fall below this are rejected outright.
_REJECT_FLOOR = 1e-150


def _check_step(step: float) -> None:
    if not 0.0 < step < 1.0:
        raise ContractViolationError("normalized step size must lie in (0, 1)")


class Preconditioner:
    """Common surface of all variants: apply P, apply P^{-1}, learn from pairs."""

    dim: int

    def apply(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_inv(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def update(self, pair: TangentPair, step: float) -> None:
        raise NotImplementedError

    def param_count(self) -> int:
        raise NotImplementedError

    def materialize_q(self) -> np.ndarray:
        """Dense Q in flat coordinates; test and diagnostic helper."""
        raise NotImplementedError

    def clone(self):
        return copy.deepcopy(self)

    def _check_dim(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ContractViolationError(
                f"vector of length {self.dim} expected, got shape {v.shape}")
        return v


class DensePrecond(Preconditioner):
    """Full preconditioner with an upper-triangular Cholesky-like factor."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractViolationError("dimension must be at least 1")
        self.dim = dim
        self.q = np.eye(dim)

    def apply(self, g):
        g = self._check_dim(g)
        return self.q.T @ (self.q @ g)

    def apply_inv(self, v):
        v = self._check_dim(v)
        w = tri_solve(self.q, v, transpose=True)
        return tri_solve(self.q, w)

    def _pair_gradient(self, dt, dg):
        a = self.q @ dg
        b = tri_solve(self.q, dt, transpose=True)
        return triu_project(np.outer(a, a) - np.outer(b, b))

    def update(self, pair, step):
        _check_step(step)
        dt = self._check_dim(pair.delta_theta)
        dg = self._check_dim(pair.delta_g)
        if np.min(np.diag(self.q)) < _SOLVE_FLOOR:
            raise DegenerateStateError("dense factor diagonal collapsed")
        grad = self._pair_gradient(dt, dg)
        nrm = max_norm(grad)
        if nrm == 0.0:
            return
        cand = self.q - (step / nrm) * (grad @ self.q)
        if np.min(np.diag(cand)) < _REJECT_FLOOR:
            return
        self.q = cand

    def param_count(self):
        return (self.dim * self.dim + self.dim) // 2

    def materialize_q(self):
        return self.q.copy()


class DiagPrecond(Preconditioner):
    """Diagonal preconditioner; its criterion optimum is the equilibration rule."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ContractViolationError("dimension must be at least 1")
        self.dim = dim
        self.q = np.ones(dim)

    def apply(self, g):
        g = self._check_dim(g)
        return self.q * self.q * g

    def apply_inv(self, v):
        v = self._check_dim(v)
        return v / (self.q * self.q)

    def _pair_gradient(self, dt, dg):
        a = self.q * dg
        b = dt / self.q
        return a * a - b * b

    def update(self, pair, step):
        _check_step(step)
        dt = self._check_dim(pair.delta_theta)
        dg = self._check_dim(pair.delta_g)
        if np.min(self.q) < _SOLVE_FLOOR:
            raise DegenerateStateError("diagonal factor collapsed")
        grad = self._pair_gradient(dt, dg)
        nrm = max_norm(grad)
        if nrm == 0.0:
            return
        cand = self.q - (step / nrm) * grad * self.q
        if np.min(cand) < _REJECT_FLOOR:
            return
        self.q = cand

    def param_count(self):
        return self.dim

    def materialize_q(self):
        return np.diag(self.q)


def closed_form_diagonal(m2_theta: np.ndarray, m2_g: np.ndarray) -> np.ndarray:
    """Optimal diagonal of P given second moments of the probe pair entries.

    Returns sqrt(m2_theta / m2_g) elementwise. With unit m2_theta this is the
    equilibration preconditioner that ESGD uses.
    """
    m2_theta = np.asarray(m2_theta, dtype=float)
    m2_g = np.asarray(m2_g, dtype=float)
    if m2_theta.shape != m2_g.shape:
        raise ContractViolationError("moment vectors must share a shape")
    if np.any(m2_theta <= 0.0):
        raise ContractViolationError("m2_theta must be strictly positive")
    if np.any(m2_g <= 0.0):
        raise DegenerateCurvatureError("zero entry in gradient second moment")
    return np.sqrt(m2_theta / m2_g)


class KronPrecond(Preconditioner):
    """Kronecker-factored preconditioner for one (M, N) matrix block.

    Both factors are upper triangular with positive diagonals; each takes its
    own normalized relative-gradient step.
    """

    def __init__(self, m: int, n: int):
        if m < 1 or n < 1:
            raise ContractViolationError("factor sizes must be at least 1")
        self.m = m
        self.n = n
        self.dim = m * n
        self.q1 = np.eye(m)
        self.q2 = np.eye(n)

    def _mat(self, v: np.ndarray) -> np.ndarray:
        return np.reshape(v, (self.m, self.n), order="F")

    def _vec(self, g: np.ndarray) -> np.ndarray:
        return np.ravel(g, order="F")

    def apply(self, g):
        g = self._check_dim(g)
        gm = self._mat(g)
        out = self.q1.T @ (self.q1 @ gm @ self.q2.T) @ self.q2
        return self._vec(out)

    def apply_inv(self, v):
        v = self._check_dim(v)
        x = self._mat(v)
        x = tri_solve(self.q1, x, transpose=True)
        x = tri_solve(self.q1, x)
        x = tri_solve(self.q2, x.T, transpose=True)
        x = tri_solve(self.q2, x)
        return self._vec(x.T)

    def _pair_gradient(self, dt, dg):
        a = self.q1 @ dg @ self.q2.T
        bt = tri_solve(self.q1, dt, transpose=True)          # Q1^{-T} dT
        bt = tri_solve(self.q2, bt.T, transpose=True).T      # ... Q2^{-1}
        g1 = triu_project(a @ a.T - bt @ bt.T)
        g2 = triu_project(a.T @ a - bt.T @ bt)
        return g1, g2

    def update(self, pair, step):
        _check_step(step)
        dt = self._mat(self._check_dim(pair.delta_theta))
        dg = self._mat(self._check_dim(pair.delta_g))
        if min(np.min(np.diag(self.q1)), np.min(np.diag(self.q2))) < _SOLVE_FLOOR:
            raise DegenerateStateError("Kronecker factor diagonal collapsed")
        g1, g2 = self._pair_gradient(dt, dg)
        n1, n2 = max_norm(g1), max_norm(g2)
        if n1 > 0.0:
            cand = self.q1 - (step / n1) * (g1 @ self.q1)
            if np.min(np.diag(cand)) >= _REJECT_FLOOR:
                self.q1 = cand
        if n2 > 0.0:
            cand = self.q2 - (step / n2) * (g2 @ self.q2)
            if np.min(np.diag(cand)) >= _REJECT_FLOOR:
                self.q2 = cand

    def param_count(self):
        return (self.m * self.m + self.n * self.n + self.m + self.n) // 2

    def materialize_q(self):
        return np.kron(self.q2, self.q1)


class ScanPrecond(Preconditioner):
    """Scaling-and-normalization preconditioner for one (M, N) matrix block.

    Q1 is diagonal (output scaling, size M); Q2 is upper triangular with
    nonzeros only on its diagonal and last column (input normalization,
    size N). Their sparsity patterns are closed under multiplication, so
    multiplicative updates stay on the group.
    """

    def __init__(self, m: int, n: int):
        if m < 1 or n < 1:
            raise ContractViolationError("factor sizes must be at least 1")
        self.m = m
        self.n = n
        self.dim = m * n
        self.q1 = np.ones(m)
        self.d2 = np.ones(n)
        self.c2 = np.zeros(n - 1)

    def _mat(self, v):
        return np.reshape(v, (self.m, self.n), order="F")

    def _vec(self, g):
        return np.ravel(g, order="F")

    # right-multiplications by the structured Q2
    def _right_q2t(self, g):
        out = g * self.d2
        if self.n > 1:
            out[:, :-1] += np.outer(g[:, -1], self.c2)
        return out

    def _right_q2(self, g):
        out = g * self.d2
        if self.n > 1:
            out[:, -1] += g[:, :-1] @ self.c2
        return out

    def _right_q2_inv(self, g):
        # solve X Q2 = G for X
        out = g / self.d2
        if self.n > 1:
            out[:, -1] = (g[:, -1] - out[:, :-1] @ self.c2) / self.d2[-1]
        return out

    def _right_q2t_inv(self, g):
        # solve Y Q2^T = X for Y
        out = np.empty_like(g)
        out[:, -1] = g[:, -1] / self.d2[-1]
        if self.n > 1:
            out[:, :-1] = (g[:, :-1] - np.outer(out[:, -1], self.c2)) / self.d2[:-1]
        return out

    def apply(self, g):
        g = self._check_dim(g)
        gm = self._mat(g)
        out = (self.q1 * self.q1)[:, None] * self._right_q2(self._right_q2t(gm))
        return self._vec(out)

    def apply_inv(self, v):
        v = self._check_dim(v)
        x = self._mat(v) / (self.q1 * self.q1)[:, None]
        return self._vec(self._right_q2t_inv(self._right_q2_inv(x)))

    def _pair_gradient(self, dt, dg):
        a = self.q1[:, None] * self._right_q2t(dg)
        bt = self._right_q2_inv(dt / self.q1[:, None])
        g1 = np.sum(a * a, axis=1) - np.sum(bt * bt, axis=1)
        gd = np.sum(a * a, axis=0) - np.sum(bt * bt, axis=0)
        gc = a[:, :-1].T @ a[:, -1] - bt[:, :-1].T @ bt[:, -1] if self.n > 1 else np.zeros(0)
        return g1, gd, gc

    def update(self, pair, step):
        _check_step(step)
        dt = self._mat(self._check_dim(pair.delta_theta))
        dg = self._mat(self._check_dim(pair.delta_g))
        if min(np.min(self.q1), np.min(self.d2)) < _SOLVE_FLOOR:
            raise DegenerateStateError("scaling/normalization factor collapsed")
        g1, gd, gc = self._pair_gradient(dt, dg)
        n1 = max_norm(g1)
        if n1 > 0.0:
            cand = self.q1 - (step / n1) * g1 * self.q1
            if np.min(cand) >= _REJECT_FLOOR:
                self.q1 = cand

        n2 = max(max_norm(gd), max_norm(gc))
        if n2 > 0.0:
            mu = step / n2
            cand_d = self.d2 - mu * gd * self.d2
            cand_c = self.c2 - mu * (gd[:-1] * self.c2 + self.d2[-1] * gc)
            if np.min(cand_d) >= _REJECT_FLOOR:
                self.d2 = cand_d
                self.c2 = cand_c

    def param_count(self):
        return self.m + 2 * self.n - 1

    def materialize_q2(self) -> np.ndarray:
        q2 = np.diag(self.d2)
        if self.n > 1:
            q2[:-1, -1] = self.c2
        return q2

    def materialize_q(self):
        return np.kron(self.materialize_q2(), np.diag(self.q1))


def scan_q2_matvec(p: ScanPrecond, x: np.ndarray) -> np.ndarray:
    """Apply the normalization factor Q2 to a feature vector.

    (Q2 x)_i = d2_i x_i + c2_i x_N for i < N and (Q2 x)_N = d2_N x_N; with the
    last entry fixed to 1 this removes means and rescales variances.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ContractViolationError(f"feature vector of length {p.n} expected")
    out = p.d2 * x
    if p.n > 1:
        out[:-1] += p.c2 * x[-1]
    return out


class SpluPrecond(Preconditioner):
    """Sparse-LU preconditioner: Q = L U with banded-plus-diagonal triangles.

    Apart from the diagonals, only the first r columns of L and the first r
    rows of U are nonzero, so every product with Q, Q^T, Q^{-1} or Q^{-T}
    costs O(rL) using the block inverse formulas for the 2x2 partition.
    """

    def __init__(self, dim: int, order: int):
        if dim < 1:
            raise ContractViolationError("dimension must be at least 1")
        if not 1 <= order <= dim:
            raise ContractViolationError("order must satisfy 1 <= r <= dim")
        self.dim = dim
        self.r = order
        k = dim - order
        self.l1 = np.eye(order)          # lower triangular
        self.l2 = np.zeros((k, order))
        self.l3 = np.ones(k)
        self.u1 = np.eye(order)          # upper triangular
        self.u2 = np.zeros((order, k))
        self.u3 = np.ones(k)

    def _split(self, v):
        return v[: self.r], v[self.r:]

    def matvec(self, v: np.ndarray, which: str) -> np.ndarray:
        """Product with Q, Q^T, Q^{-1} or Q^{-T} (which in {q, qt, qinv, qinvt})."""
        v = self._check_dim(v)
        if min(np.min(np.diag(self.l1)), np.min(np.diag(self.u1)),
               np.min(self.l3, initial=np.inf), np.min(self.u3, initial=np.inf)) < _SOLVE_FLOOR:
            raise DegenerateStateError("sparse-LU factor diagonal collapsed")
        v1, v2 = self._split(v)
        if which == "q":
            w1 = self.u1 @ v1 + self.u2 @ v2
            w2 = self.u3 * v2
            return np.concatenate([self.l1 @ w1, self.l2 @ w1 + self.l3 * w2])
        if which == "qt":
            w1 = self.l1.T @ v1 + self.l2.T @ v2
            w2 = self.l3 * v2
            return np.concatenate([self.u1.T @ w1, self.u2.T @ w1 + self.u3 * w2])
        if which == "qinv":
            y1 = tri_solve(self.l1, v1, lower=True)
            y2 = (v2 - self.l2 @ y1) / self.l3
            x2 = y2 / self.u3
            x1 = tri_solve(self.u1, y1 - self.u2 @ x2)
            return np.concatenate([x1, x2])
        if which == "qinvt":
            w1 = tri_solve(self.u1, v1, transpose=True)
            w2 = (v2 - self.u2.T @ w1) / self.u3
            x2 = w2 / self.l3
            x1 = tri_solve(self.l1, w1 - self.l2.T @ x2, lower=True, transpose=True)
            return np.concatenate([x1, x2])
        raise ContractViolationError(f"unknown matvec selector {which!r}")

    def apply(self, g):
        return self.matvec(self.matvec(g, "q"), "qt")

    def apply_inv(self, v):
        return self.matvec(self.matvec(v, "qinvt"), "qinv")

    def materialize_q(self) -> np.ndarray:
        """Dense Q = L U; test and diagnostic helper, O(L^2) storage."""
        k = self.dim - self.r
        low = np.zeros((self.dim, self.dim))
        low[: self.r, : self.r] = self.l1
        low[self.r:, : self.r] = self.l2
        low[self.r:, self.r:] = np.diag(self.l3)
        up = np.zeros((self.dim, self.dim))
        up[: self.r, : self.r] = self.u1
        up[: self.r, self.r:] = self.u2
        up[self.r:, self.r:] = np.diag(self.u3)
        return low @ up

    def _pair_gradient(self, dt, dg):
        g1, g2 = self._split(dg)
        x1, x2 = self._split(dt)

        # a = Q dg and b = Q^{-T} dt, kept in partitioned form
        ug1 = self.u1 @ g1 + self.u2 @ g2
        ug2 = self.u3 * g2
        qg1 = self.l1 @ ug1
        qg2 = self.l2 @ ug1 + self.l3 * ug2
        iutx1 = tri_solve(self.u1, x1, transpose=True)
        iutx2 = (x2 - self.u2.T @ iutx1) / self.u3
        iqtx2 = iutx2 / self.l3
        iqtx1 = tri_solve(self.l1, iutx1 - self.l2.T @ iqtx2, lower=True, transpose=True)

        # P dg = Q^T a and P^{-1} dt = Q^{-1} b
        ltqg1 = self.l1.T @ qg1 + self.l2.T @ qg2
        ltqg2 = self.l3 * qg2
        pg1 = self.u1.T @ ltqg1
        pg2 = self.u2.T @ ltqg1 + self.u3 * ltqg2
        iliqtx1 = tri_solve(self.l1, iqtx1, lower=True)
        iliqtx2 = (iqtx2 - self.l2 @ iliqtx1) / self.l3
        ipx2 = iliqtx2 / self.u3
        ipx1 = tri_solve(self.u1, iliqtx1 - self.u2 @ ipx2)

        # L side: projection of (a a^T - b b^T) onto {first r columns, diagonal};
        # U side: same projection of (P dg dg^T - dt (P^{-1} dt)^T) onto
        # {first r rows, diagonal}
        gl1 = np.tril(np.outer(qg1, qg1) - np.outer(iqtx1, iqtx1))
        gl2 = np.outer(qg2, qg1) - np.outer(iqtx2, iqtx1)
        gl3 = qg2 * qg2 - iqtx2 * iqtx2
        gu1 = triu_project(np.outer(pg1, g1) - np.outer(x1, ipx1))
        gu2 = np.outer(pg1, g2) - np.outer(x1, ipx2)
        gu3 = pg2 * g2 - x2 * ipx2
        return gl1, gl2, gl3, gu1, gu2, gu3

    def update(self, pair, step):
        _check_step(step)
        dt = self._check_dim(pair.delta_theta)
        dg = self._check_dim(pair.delta_g)
        if min(np.min(np.diag(self.l1)), np.min(np.diag(self.u1)),
               np.min(self.l3, initial=np.inf), np.min(self.u3, initial=np.inf)) < _SOLVE_FLOOR:
            raise DegenerateStateError("sparse-LU factor diagonal collapsed")
        gl1, gl2, gl3, gu1, gu2, gu3 = self._pair_gradient(dt, dg)
        nl = max(max_norm(gl1), max_norm(gl2), max_norm(gl3))
        if nl > 0.0:
            mu = step / nl
            cand_l1 = self.l1 - mu * (gl1 @ self.l1)
            cand_l2 = self.l2 - mu * (gl2 @ self.l1 + gl3[:, None] * self.l2)
            cand_l3 = self.l3 - mu * gl3 * self.l3
            if min(np.min(np.diag(cand_l1)), np.min(cand_l3, initial=np.inf)) >= _REJECT_FLOOR:
                self.l1, self.l2, self.l3 = cand_l1, cand_l2, cand_l3

        nu = max(max_norm(gu1), max_norm(gu2), max_norm(gu3))
        if nu > 0.0:
            mu = step / nu
            cand_u1 = self.u1 - mu * (self.u1 @ gu1)
            cand_u2 = self.u2 - mu * (self.u1 @ gu2 + gu3[None, :] * self.u2)
            cand_u3 = self.u3 - mu * gu3 * self.u3
            if min(np.min(np.diag(cand_u1)), np.min(cand_u3, initial=np.inf)) >= _REJECT_FLOOR:
                self.u1, self.u2, self.u3 = cand_u1, cand_u2, cand_u3

    def param_count(self):
        return 2 * (self.r + 1) * self.dim - self.r * self.r - 2 * self.r


def splu_matvec(p: SpluPrecond, v: np.ndarray, which: str) -> np.ndarray:
    """Module-level alias for :meth:`SpluPrecond.matvec`."""
    return p.matvec(v, which)


class DirectSumPrecond(Preconditioner):
    """Direct sum of per-block preconditioners tiling the flat parameter vector.

    Blocks are orthogonal, so each one learns from its own slice of a pair
    and takes its own normalized step.
    """

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise ContractViolationError("direct sum needs at least one block")
        self.blocks = blocks
        self.slices = []
        start = 0
        for _, p in blocks:
            self.slices.append(slice(start, start + p.dim))
            start += p.dim
        self.dim = start

    def route(self, pair: TangentPair):
        """Slice a pair into per-block pairs (in block order)."""
        dt = self._check_dim(pair.delta_theta)
        dg = self._check_dim(pair.delta_g)
        return [TangentPair(dt[s], dg[s]) for s in self.slices]

    def apply(self, g):
        g = self._check_dim(g)
        return np.concatenate([p.apply(g[s]) for (_, p), s in zip(self.blocks, self.slices)])

    def apply_inv(self, v):
        v = self._check_dim(v)
        return np.concatenate([p.apply_inv(v[s]) for (_, p), s in zip(self.blocks, self.slices)])

    def update(self, pair, step):
        for (_, p), sub in zip(self.blocks, self.route(pair)):
            p.update(sub, step)

    def param_count(self):
        return sum(p.param_count() for _, p in self.blocks)

    def materialize_q(self):
        q = np.zeros((self.dim, self.dim))
        for (_, p), s in zip(self.blocks, self.slices):
            q[s, s] = p.materialize_q()
        return q


def direct_sum_route(p: DirectSumPrecond, pair: TangentPair):
    """Module-level alias for :meth:`DirectSumPrecond.route`."""
    return p.route(pair)


def estimation_criterion(p: Preconditioner, pairs) -> float:
    """Empirical estimation criterion over a set of tangent pairs."""
    total = 0.0
    count = 0
    for pair in pairs:
        total += float(pair.delta_g @ p.apply(pair.delta_g))
        total += float(pair.delta_theta @ p.apply_inv(pair.delta_theta))
        count += 1
    if count == 0:
        raise ContractViolationError("criterion needs at least one pair")
    return total / count


def make_preconditioner(variant: str, layout, splu_order: int = 10,
                        per_block: bool = False) -> Preconditioner:
    """Build a preconditioner for a parameter layout.

    dense/diag/splu act on the whole flattened vector by default (one block
    per tensor with ``per_block=True``); kron/scan always get one factored
    block per layout tensor, treating vector tensors as single-column
    matrices.
    """
    def block_shape(shape):
        if len(shape) == 1:
            return shape[0], 1
        if len(shape) == 2:
            return shape
        raise ContractViolationError(f"unsupported tensor rank {len(shape)}")

    def flat_variant(dim):
        if variant == "dense":
            return DensePrecond(dim)
        if variant == "diag":
            return DiagPrecond(dim)
        if variant == "splu":
            return SpluPrecond(dim, min(splu_order, dim))
        raise ContractViolationError(f"unknown preconditioner variant {variant!r}")

    if variant in ("kron", "scan"):
        cls = KronPrecond if variant == "kron" else ScanPrecond
        return DirectSumPrecond(
            [(b.name, cls(*block_shape(b.shape))) for b in layout.blocks])
    if per_block:
        return DirectSumPrecond(
            [(b.name, flat_variant(int(np.prod(b.shape)))) for b in layout.blocks])
    return flat_variant(layout.size)
