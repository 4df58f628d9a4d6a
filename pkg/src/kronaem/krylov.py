"""Preconditioned conjugate gradients on matricized multi-term systems.

Every linear system met by the solvers has the form
``sum_i Kt_i X Gt_i^T = R`` where one side holds the sparse problem matrices
and the other small dense reductions ``Z^T M Z`` (or scalars). CG runs on
``X`` directly with the Frobenius inner product; the mean-based
preconditioner ``X -> Mx^{-1} X Mxi^{-1}`` is the inverse of ``Mxi kron Mx``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg as spla
import scipy.sparse as sp
import scipy.sparse.linalg as spla_sparse

logger = logging.getLogger(__name__)


class FactorizationError(RuntimeError):
    """A preconditioner matrix is not symmetric positive definite."""


class IndefiniteSystemError(RuntimeError):
    """CG met a direction with non-positive curvature."""


# ---------------------------------------------------------------------------
# factorizations
# ---------------------------------------------------------------------------


class IdentityFactor:
    """Stands in for the scalar preconditioner ``1`` and for ``G_0 = I``."""

    def __init__(self, n: int):
        self.n = n

    def solve(self, R: np.ndarray) -> np.ndarray:
        return R


class DenseCholesky:
    def __init__(self, M: np.ndarray):
        M = np.asarray(M, dtype=np.float64)
        try:
            self._cf = spla.cho_factor(0.5 * (M + M.T), lower=True)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"dense {M.shape} preconditioner is not SPD") from exc
        self.n = M.shape[0]

    def solve(self, R: np.ndarray) -> np.ndarray:
        return spla.cho_solve(self._cf, R)


class SparseSymmetricFactor:
    """``L D L^T``-style sparse LU with a symmetric ordering and no pivoting.

    Without row pivoting the LU of a symmetric matrix has ``U = D L^T``, so
    positive definiteness is equivalent to a positive ``diag(U)``.
    """

    def __init__(self, M):
        M = sp.csc_matrix(M, dtype=np.float64)
        if abs(M - M.T).max() > 1e-12 * max(abs(M).max(), 1e-300):
            raise FactorizationError("sparse preconditioner is not symmetric")
        try:
            self._lu = spla_sparse.splu(
                M,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        if np.any(self._lu.U.diagonal() <= 0):
            raise FactorizationError("sparse preconditioner is not positive definite")
        self.n = M.shape[0]

    def solve(self, R: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(R, dtype=np.float64))


def factorize(M):
    """Factorization object with ``solve(R) = M^{-1} R`` for SPD ``M``.

    Sparse identities (the orthonormal-gPC ``G_0``) and ``1 x 1`` matrices
    equal to one collapse to :class:`IdentityFactor`.
    """
    if sp.issparse(M):
        n = M.shape[0]
        D = M - sp.identity(n, format="csr")
        if D.count_nonzero() == 0 or abs(D).max() == 0.0:
            return IdentityFactor(n)
        return SparseSymmetricFactor(M)
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape == (1, 1) and M[0, 0] == 1.0:
        return IdentityFactor(1)
    return DenseCholesky(M)


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------


def _is_scalar(M) -> bool:
    return M.shape == (1, 1)


def _scalar(M) -> float:
    return float(M[0, 0]) if not sp.issparse(M) else float(M.toarray()[0, 0])


@dataclass(eq=False)
class MatricizedSystem:
    """``sum_i Kt[i] X Gt[i]^T = rhs`` with preconditioner factors ``Mx``, ``Mxi``."""

    Ktil: Sequence
    Gtil: Sequence
    rhs: np.ndarray
    Mx: object
    Mxi: object

    def __post_init__(self):
        if len(self.Ktil) != len(self.Gtil) or not self.Ktil:
            raise ValueError("Ktil and Gtil must be non-empty lists of equal length")
        self.rhs = np.atleast_2d(np.asarray(self.rhs, dtype=np.float64))
        shape = (self.Ktil[0].shape[0], self.Gtil[0].shape[0])
        if self.rhs.shape != shape:
            raise ValueError(f"rhs has shape {self.rhs.shape}, operator acts on {shape}")
        # when one side is all scalars the terms collapse to a single matrix
        self._single = None
        if all(_is_scalar(g) for g in self.Gtil):
            self._single = ("K", _combine(self.Ktil, [_scalar(g) for g in self.Gtil]))
        elif all(_is_scalar(k) for k in self.Ktil):
            self._single = ("G", _combine(self.Gtil, [_scalar(k) for k in self.Ktil]))

    @property
    def shape(self):
        return self.rhs.shape

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self._single is not None:
            side, M = self._single
            return M @ X if side == "K" else (M @ X.T).T
        out = np.zeros_like(X)
        for k, g in zip(self.Ktil, self.Gtil):
            out += (g @ (k @ X).T).T
        return out

    def precondition(self, R: np.ndarray) -> np.ndarray:
        Z = self.Mx.solve(R)
        return self.Mxi.solve(Z.T).T


def _combine(mats, weights):
    total = None
    for M, w in zip(mats, weights):
        term = w * M
        total = term if total is None else total + term
    return sp.csr_matrix(total) if sp.issparse(total) else np.asarray(total)


@dataclass(frozen=True)
class PcgConfig:
    tol: float = 1e-5
    max_iters: int = 1000

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"PCG tolerance must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


class PcgResult(NamedTuple):
    X: np.ndarray
    iters: int
    relres: float
    converged: bool


def pcg_solve(sys: MatricizedSystem, cfg: PcgConfig, X0: Optional[np.ndarray] = None) -> PcgResult:
    """Solve ``sys`` by preconditioned CG in matrix form.

    Stops when ``||rhs - A(X)||_F <= tol ||rhs||_F``. If ``max_iters`` is
    reached the iterate with the smallest residual is returned with
    ``converged=False``. Raises :class:`IndefiniteSystemError` if a search
    direction has non-positive curvature.
    """
    b = sys.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return PcgResult(np.zeros_like(b), 0, 0.0, True)
    if X0 is None:
        X = np.zeros_like(b)
        R = b.copy()
    else:
        X = np.array(X0, dtype=np.float64).reshape(b.shape)
        R = b - sys.apply(X)
    rnorm = np.linalg.norm(R)
    target = cfg.tol * bnorm
    if rnorm <= target:
        return PcgResult(X, 0, rnorm / bnorm, True)
    best_X, best_r = X.copy(), rnorm
    Z = sys.precondition(R)
    P = Z.copy()
    rz = np.vdot(R, Z)
    for it in range(1, cfg.max_iters + 1):
        Q = sys.apply(P)
        curv = np.vdot(P, Q)
        if not curv > 0:
            raise IndefiniteSystemError(
                f"non-positive curvature {curv:.3e} at PCG iteration {it}"
            )
        alpha = rz / curv
        X += alpha * P
        R -= alpha * Q
        rnorm = np.linalg.norm(R)
        if rnorm < best_r:
            best_r = rnorm
            best_X = X.copy()
        if rnorm <= target:
            true_r = np.linalg.norm(b - sys.apply(X))
            return PcgResult(X, it, true_r / bnorm, True)
        Z = sys.precondition(R)
        rz_new = np.vdot(R, Z)
        P = Z + (rz_new / rz) * P
        rz = rz_new
    true_r = np.linalg.norm(b - sys.apply(best_X))
    logger.warning("PCG hit max_iters=%d with relres %.3e", cfg.max_iters, true_r / bnorm)
    return PcgResult(best_X, cfg.max_iters, true_r / bnorm, False)


# ---------------------------------------------------------------------------
# the systems of each solver step
# ---------------------------------------------------------------------------

#: Solver steps sharing a preconditioner pattern. For "v" solves the right
#: factor W is fixed; for "w" solves V is fixed.
SYSTEM_ROWS = ("s-rank1", "pgd", "pgd-gs", "r-stage-p", "stage-p")
_RANK_ONE_ROWS = ("s-rank1", "pgd-gs")


def reduced_terms(op, side: str, fixed: np.ndarray):
    """``(Kt, Gt)`` for a solve with the other factor ``fixed``.

    ``side="v"``: ``Kt_i = K_i``, ``Gt_i = fixed^T G_i fixed``.
    ``side="w"``: ``Kt_i = fixed^T K_i fixed``, ``Gt_i = G_i``; the unknown is
    the transposed factor ``W^T``.
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    if fixed.ndim == 1:
        fixed = fixed[:, None]
    if side == "v":
        return list(op.K), [fixed.T @ (g @ fixed) for g in op.G]
    if side == "w":
        return [fixed.T @ (k @ fixed) for k in op.K], list(op.G)
    raise ValueError(f"side must be 'v' or 'w', got {side!r}")


def make_preconditioner(problem, row: str, side: str, fixed: Optional[np.ndarray] = None):
    """``(Mx, Mxi)`` factorizations for one solver step.

    ========== ====== ======================= =======================
    row        side   Mx                      Mxi
    ========== ====== ======================= =======================
    s-rank1    v      K_0                     1
    s-rank1    w      1                       G_0
    pgd-gs     v / w  as s-rank1
    pgd        v      K_0                     Wt^T G_0 Wt
    pgd        w      Vt^T K_0 Vt             G_0
    r-stage-p  v / w  as pgd
    stage-p    v / w  as pgd
    ========== ====== ======================= =======================

    ``fixed`` is the orthonormalized fixed factor for the reduced rows.
    """
    if row not in SYSTEM_ROWS:
        raise ValueError(f"unknown system row {row!r}; choose from {SYSTEM_ROWS}")
    if side not in ("v", "w"):
        raise ValueError(f"side must be 'v' or 'w', got {side!r}")
    K0f, G0f = problem.mean_factors
    if row in _RANK_ONE_ROWS:
        return (K0f, IdentityFactor(1)) if side == "v" else (IdentityFactor(1), G0f)
    if fixed is None:
        raise ValueError(f"row {row!r} needs the orthonormalized fixed factor")
    fixed = np.asarray(fixed, dtype=np.float64)
    if fixed.ndim == 1:
        fixed = fixed[:, None]
    if side == "v":
        return K0f, factorize(fixed.T @ (problem.op.G[0] @ fixed))
    return factorize(fixed.T @ (problem.op.K[0] @ fixed)), G0f


def build_system(problem, row: str, side: str, fixed: np.ndarray, rhs: np.ndarray,
                 precond_basis: Optional[np.ndarray] = None) -> MatricizedSystem:
    """Assemble the system of ``row``/``side`` with ``fixed`` as the frozen factor.

    ``precond_basis`` overrides the factor used to reduce the mean term in
    the preconditioner (defaults to ``fixed``).
    """
    Kt, Gt = reduced_terms(problem.op, side, fixed)
    Mx, Mxi = make_preconditioner(problem, row, side, fixed if precond_basis is None else precond_basis)
    return MatricizedSystem(Kt, Gt, rhs, Mx, Mxi)
