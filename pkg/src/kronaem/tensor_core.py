"""Kronecker-structured operators and low-rank factored matrices.

The operator ``A(X) = sum_i K_i X G_i^T`` acts on ``n1 x n2`` matrices and is
the matricized form of ``(sum_i G_i kron K_i) vec(X)`` with column-stacking
``vec``. Low-rank matrices ``V W^T`` are kept as their two factors; norms and
inner products are evaluated from small Gram matrices so the ``n1 x n2``
product is never formed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as spla
import scipy.sparse as sp

logger = logging.getLogger(__name__)

#: Relative threshold below which a column is treated as linearly dependent.
RANK_TOL = 1e-12


def as_sparse(M) -> sp.csr_matrix:
    """Convert ``M`` to CSR with sorted, unique column indices per row."""
    S = sp.csr_matrix(M, dtype=np.float64)
    S.sum_duplicates()
    S.sort_indices()
    return S


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """A matrix ``V @ W.T`` stored as its factors.

    ``V`` is ``n1 x p`` and ``W`` is ``n2 x p``; ``p = 0`` encodes the zero
    matrix.
    """

    V: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.V, dtype=np.float64)
        W = np.asarray(self.W, dtype=np.float64)
        if V.ndim == 1:
            V = V[:, None]
        if W.ndim == 1:
            W = W[:, None]
        if V.ndim != 2 or W.ndim != 2:
            raise ValueError("factors must be two-dimensional")
        if V.shape[1] != W.shape[1]:
            raise ValueError(
                f"factor column counts differ: V has {V.shape[1]}, W has {W.shape[1]}"
            )
        V.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "W", W)

    @classmethod
    def zeros(cls, n1: int, n2: int) -> "LowRankFactors":
        return cls(np.zeros((n1, 0)), np.zeros((n2, 0)))

    @property
    def rank(self) -> int:
        return self.V.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.V.shape[0], self.W.shape[0]

    def full(self) -> np.ndarray:
        return self.V @ self.W.T

    def append(self, v, w) -> "LowRankFactors":
        v = np.asarray(v, dtype=np.float64).reshape(self.V.shape[0], -1)
        w = np.asarray(w, dtype=np.float64).reshape(self.W.shape[0], -1)
        return LowRankFactors(np.hstack([self.V, v]), np.hstack([self.W, w]))

    def truncate(self, p: int) -> "LowRankFactors":
        """Keep the first ``p`` pairs."""
        return LowRankFactors(self.V[:, :p], self.W[:, :p])


@dataclass(frozen=True, eq=False)
class KroneckerOperator:
    """The linear map ``X -> sum_i K[i] @ X @ G[i].T``.

    ``K[0]`` and ``G[0]`` are the mean terms used to build preconditioners
    and must be symmetric positive definite.
    """

    K: tuple
    G: tuple

    def __post_init__(self):
        K = tuple(as_sparse(k) for k in self.K)
        G = tuple(as_sparse(g) for g in self.G)
        if len(K) == 0 or len(K) != len(G):
            raise ValueError(
                f"need equal, non-empty term lists, got {len(K)} K and {len(G)} G"
            )
        n1 = K[0].shape[0]
        n2 = G[0].shape[0]
        for i, (k, g) in enumerate(zip(K, G)):
            if k.shape != (n1, n1):
                raise ValueError(f"K[{i}] has shape {k.shape}, expected {(n1, n1)}")
            if g.shape != (n2, n2):
                raise ValueError(f"G[{i}] has shape {g.shape}, expected {(n2, n2)}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "G", G)

    @property
    def n1(self) -> int:
        return self.K[0].shape[0]

    @property
    def n2(self) -> int:
        return self.G[0].shape[0]

    @property
    def n_terms(self) -> int:
        return len(self.K)

    def to_sparse(self) -> sp.csc_matrix:
        """Explicit ``sum_i kron(G_i, K_i)``; only sensible at small sizes."""
        A = sp.csc_matrix((self.n1 * self.n2, self.n1 * self.n2))
        for k, g in zip(self.K, self.G):
            A = A + sp.kron(g, k, format="csc")
        return A.tocsc()

    def reordered(self, order: Sequence[int]) -> "KroneckerOperator":
        return KroneckerOperator(
            tuple(self.K[i] for i in order), tuple(self.G[i] for i in order)
        )


def _check_dense(op: KroneckerOperator, X: np.ndarray, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (op.n1, op.n2):
        raise ValueError(f"{name} has shape {X.shape}, expected {(op.n1, op.n2)}")
    return X


def _check_factors(op: KroneckerOperator, F: LowRankFactors, name="F"):
    if F.shape != (op.n1, op.n2):
        raise ValueError(f"{name} has shape {F.shape}, expected {(op.n1, op.n2)}")


def apply(op: KroneckerOperator, X: np.ndarray) -> np.ndarray:
    """Return ``sum_i K_i X G_i^T``."""
    X = _check_dense(op, X)
    out = np.zeros_like(X)
    for k, g in zip(op.K, op.G):
        # (g @ (k @ X).T).T == k @ X @ g.T with sparse products only
        out += (g @ (k @ X).T).T
    return out


def apply_lowrank(op: KroneckerOperator, F: LowRankFactors) -> LowRankFactors:
    """Factors of ``A(V W^T)``: ``([K_0 V | ... | K_m V], [G_0 W | ... | G_m W])``."""
    _check_factors(op, F)
    if F.rank == 0:
        return LowRankFactors.zeros(op.n1, op.n2)
    V = np.hstack([k @ F.V for k in op.K])
    W = np.hstack([g @ F.W for g in op.G])
    return LowRankFactors(V, W)


def frobenius_norm_lowrank(F: LowRankFactors) -> float:
    """``||V W^T||_F`` from the entry sum of ``(V^T V) * (W^T W)``."""
    if F.rank == 0:
        return 0.0
    s = np.sum((F.V.T @ F.V) * (F.W.T @ F.W))
    # rounding can push a zero norm slightly negative
    return float(np.sqrt(max(s, 0.0)))


def frobenius_norm_qr(F: LowRankFactors) -> float:
    """``||V W^T||_F = ||R_V R_W^T||_F`` from the triangular QR factors.

    Slower than the Gram form but free of cancellation, so it stays accurate
    for differences and residuals far below ``sqrt(eps)`` of the operands.
    """
    if F.rank == 0:
        return 0.0
    Rv = spla.qr(F.V, mode="r")[0]
    Rw = spla.qr(F.W, mode="r")[0]
    return float(np.linalg.norm(Rv @ Rw.T))


def frobenius_diff_lowrank(F1: LowRankFactors, F2: LowRankFactors) -> float:
    """``||V1 W1^T - V2 W2^T||_F`` via the stacked factors ``([V1|-V2], [W1|W2])``."""
    if F1.shape != F2.shape:
        raise ValueError(f"shape mismatch: {F1.shape} vs {F2.shape}")
    stacked = LowRankFactors(np.hstack([F1.V, -F2.V]), np.hstack([F1.W, F2.W]))
    return frobenius_norm_qr(stacked)


def residual_norm(op: KroneckerOperator, F: LowRankFactors, B: LowRankFactors) -> float:
    """``||B - A(V W^T)||_F`` evaluated entirely on factors."""
    _check_factors(op, F)
    _check_factors(op, B, "B")
    return frobenius_diff_lowrank(B, apply_lowrank(op, F))


def a_inner(op: KroneckerOperator, X: np.ndarray, Y: np.ndarray) -> float:
    """Energy inner product ``<A(X), Y>``."""
    Y = _check_dense(op, Y, "Y")
    return float(np.sum(apply(op, X) * Y))


def objective_and_gradients(op: KroneckerOperator, B: LowRankFactors, F: LowRankFactors):
    """Variable part of the energy objective and its factor gradients.

    Returns ``(J, gV, gW)`` with ``J = 1/2 <A(V W^T), V W^T> - <B, V W^T>``,
    ``gV = (A(V W^T) - B) W`` and ``gW = (A(V W^T) - B)^T V``. The constant
    ``1/2 ||U||_A^2`` of the full objective needs the unknown solution and is
    left out; it does not change gradients or comparisons between iterates.
    """
    _check_factors(op, F)
    _check_factors(op, B, "B")
    V, W = F.V, F.W
    if F.rank == 0:
        return 0.0, np.zeros((op.n1, 0)), np.zeros((op.n2, 0))
    quad = 0.0
    gV = -B.V @ (B.W.T @ W)
    gW = -B.W @ (B.V.T @ V)
    for k, g in zip(op.K, op.G):
        KV = k @ V
        GW = g @ W
        quad += np.sum((V.T @ KV) * (W.T @ GW))
        gV += KV @ (GW.T @ W)
        gW += GW @ (KV.T @ V)
    lin = np.sum((B.V.T @ V) * (B.W.T @ W))
    return float(0.5 * quad - lin), gV, gW


def orthonormalize(M: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis ``Q`` of ``range(M)`` with ``diag(R) > 0``.

    Columns whose pivoted-QR diagonal falls below ``tol * |R[0, 0]|`` are
    treated as dependent and dropped; the returned width is the numerical
    rank. Full-rank input keeps its column order, so an orthonormal ``M``
    comes back unchanged.
    """
    M = np.asarray(M, dtype=np.float64)
    n, k = M.shape
    if k == 0:
        return np.zeros((n, 0))
    Q, R, piv = spla.qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return np.zeros((n, 0))
    r = int(np.sum(d > tol * d[0]))
    if r < k:
        logger.debug("orthonormalize: dropped %d dependent column(s)", k - r)
        M = M[:, np.sort(piv[:r])]
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def compress(F: LowRankFactors, rel_tol: float = 1e-14):
    """Thin SVD of ``V W^T`` from the factors.

    Returns ``(U, s, Z)`` with orthonormal ``U`` (n1 x r), ``Z`` (n2 x r) and
    singular values ``s`` sorted descending, with values below
    ``rel_tol * s[0]`` dropped.
    """
    n1, n2 = F.shape
    if F.rank == 0:
        return np.zeros((n1, 0)), np.zeros(0), np.zeros((n2, 0))
    Qv, Rv = np.linalg.qr(F.V)
    Qw, Rw = np.linalg.qr(F.W)
    a, s, bt = np.linalg.svd(Rv @ Rw.T)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((n1, 0)), np.zeros(0), np.zeros((n2, 0))
    r = int(np.sum(s > rel_tol * s[0]))
    return Qv @ a[:, :r], s[:r], Qw @ bt[:r].T
