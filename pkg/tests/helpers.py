"""Small problem generators and dense oracles shared by the tests."""
import numpy as np
import scipy.sparse as sp

from kronaem import GalerkinProblem, KroneckerOperator, LowRankFactors


def random_spd(rng, n, shift=1.0):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + shift * np.eye(n)


def random_sym(rng, n):
    A = rng.standard_normal((n, n))
    return 0.5 * (A + A.T)


def dense_kron(op):
    """Explicit ``sum_i G_i kron K_i``."""
    return sum(np.kron(g.toarray(), k.toarray()) for k, g in zip(op.K, op.G))


def random_problem(rng, n1, n2, n_terms=2, rhs_rank=1, coupling=0.3):
    """Random SPD multi-term system; the fluctuation terms are scaled down until the sum is SPD."""
    K = [random_spd(rng, n1)] + [random_sym(rng, n1) for _ in range(n_terms - 1)]
    G = [random_spd(rng, n2)] + [random_sym(rng, n2) for _ in range(n_terms - 1)]
    scale = coupling
    while True:
        Ks = [K[0]] + [scale * k / np.linalg.norm(k, 2) for k in K[1:]]
        Gs = [G[0]] + [g / np.linalg.norm(g, 2) for g in G[1:]]
        op = KroneckerOperator(tuple(sp.csr_matrix(k) for k in Ks),
                               tuple(sp.csr_matrix(g) for g in Gs))
        if np.linalg.eigvalsh(dense_kron(op))[0] > 1e-2:
            break
        scale *= 0.5
    rhs = LowRankFactors(rng.standard_normal((n1, rhs_rank)), rng.standard_normal((n2, rhs_rank)))
    return GalerkinProblem(op, rhs, n1, n2)


def identity_problem(f, g):
    """``I U I^T = f g^T``: a single-term system whose solution is the right-hand side."""
    n1, n2 = len(f), len(g)
    op = KroneckerOperator((sp.identity(n1, format="csr"),), (sp.identity(n2, format="csr"),))
    return GalerkinProblem(op, LowRankFactors(np.asarray(f, float), np.asarray(g, float)), n1, n2)


def dense_solve(problem):
    A = dense_kron(problem.op)
    b = problem.rhs.full().reshape(-1, order="F")
    return np.linalg.solve(A, b).reshape((problem.n_x, problem.n_xi), order="F")


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b))
