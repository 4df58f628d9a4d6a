"""Dense reference solutions and the error measures used to judge low-rank iterates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .krylov import SparseSymmetricFactor
from .sgfem import GalerkinProblem
from .tensor_core import LowRankFactors, a_inner, frobenius_norm_lowrank, residual_norm

#: Largest ``n1 * n2`` for which a dense reference may be built.
DENSE_CAP = 200_000


class DenseCapError(ValueError):
    """The problem is too large for a dense reference."""


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    """Direct solution ``U`` with its SVD ``U = Vs diag(s) Ws^T``.

    Signs are normalized so the largest-magnitude entry of every left
    singular vector is positive.
    """

    U: np.ndarray
    s: np.ndarray
    Vs: np.ndarray
    Ws: np.ndarray

    @property
    def shape(self):
        return self.U.shape

    def truncation(self, p: int) -> LowRankFactors:
        return LowRankFactors(self.Vs[:, :p] * self.s[:p], self.Ws[:, :p])


def reference_from_matrix(U: np.ndarray) -> ReferenceSolution:
    U = np.asarray(U, dtype=np.float64)
    Vs, s, WsT = np.linalg.svd(U, full_matrices=False)
    Ws = WsT.T
    idx = np.argmax(np.abs(Vs), axis=0)
    signs = np.sign(Vs[idx, np.arange(Vs.shape[1])])
    signs[signs == 0] = 1.0
    return ReferenceSolution(U, s, Vs * signs, Ws * signs)


def dense_reference(problem: GalerkinProblem, cap: int = DENSE_CAP) -> ReferenceSolution:
    """Solve the vectorized system with a sparse symmetric direct factorization.

    ``vec`` stacks columns, so the solution vector reshapes to ``U`` in
    Fortran order.
    """
    n1, n2 = problem.n_x, problem.n_xi
    if n1 * n2 > cap:
        raise DenseCapError(f"n1*n2 = {n1 * n2} exceeds the dense cap {cap}")
    A = problem.op.to_sparse()
    b = problem.rhs.full().reshape(-1, order="F")
    u = SparseSymmetricFactor(A).solve(b)
    return reference_from_matrix(np.asarray(u).reshape((n1, n2), order="F"))


class ErrorMetrics(NamedTuple):
    energy: float
    frob: float
    relres: float


def error_metrics(problem: GalerkinProblem, ref: ReferenceSolution | None,
                  F: LowRankFactors) -> ErrorMetrics:
    """Energy-norm and Frobenius errors against ``ref`` plus the relative residual.

    Without a reference the two errors are ``nan``.
    """
    bnorm = frobenius_norm_lowrank(problem.rhs)
    relres = residual_norm(problem.op, F, problem.rhs) / bnorm if bnorm > 0 else 0.0
    if ref is None:
        return ErrorMetrics(float("nan"), float("nan"), relres)
    E = ref.U - F.full()
    energy = np.sqrt(max(a_inner(problem.op, E, E), 0.0))
    return ErrorMetrics(float(energy), float(np.linalg.norm(E)), float(relres))


def _unit_columns(M):
    n = np.linalg.norm(M, axis=0)
    n[n == 0] = 1.0
    return M / n


def angle_matrices(ref: ReferenceSolution, F: LowRankFactors):
    """Cosines ``Vs^T V~`` and ``Ws^T W~`` with unit-normalized factor columns."""
    return ref.Vs.T @ _unit_columns(F.V), ref.Ws.T @ _unit_columns(F.W)


def svd_truncation_curve(problem: GalerkinProblem, ref: ReferenceSolution, p_max: int):
    """``[(p, energy, frob)]`` for the rank-``p`` SVD truncations, ``p = 1..p_max``."""
    p_max = min(p_max, ref.s.size)
    tail = np.sqrt(np.maximum(np.cumsum((ref.s ** 2)[::-1])[::-1], 0.0))
    out = []
    for p in range(1, p_max + 1):
        E = (ref.Vs[:, p:] * ref.s[p:]) @ ref.Ws[:, p:].T
        energy = np.sqrt(max(a_inner(problem.op, E, E), 0.0))
        frob = float(tail[p]) if p < ref.s.size else 0.0
        out.append((p, float(energy), frob))
    return out


def well_separated_directions(s: np.ndarray, count: int, gap: float = 1e-6) -> list:
    """Indices ``i < count`` whose singular value is isolated by a relative gap ``> gap``.

    Members of (near-)equal pairs are left out, which exempts the 2x2 blocks
    that angle plots show at repeated singular values.
    """
    s = np.asarray(s, dtype=np.float64)
    keep = []
    for i in range(min(count, s.size)):
        left = i == 0 or (s[i - 1] - s[i]) > gap * s[i - 1]
        right = i == s.size - 1 or (s[i] - s[i + 1]) > gap * s[i]
        if left and right:
            keep.append(i)
    return keep
