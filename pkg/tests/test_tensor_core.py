import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from kronaem.tensor_core import (
    KroneckerOperator,
    LowRankFactors,
    a_inner,
    apply,
    apply_lowrank,
    compress,
    frobenius_diff_lowrank,
    frobenius_norm_lowrank,
    objective_and_gradients,
    orthonormalize,
    residual_norm,
)

from helpers import dense_kron, dense_solve, random_problem, rel


def identity_op(n1, n2):
    return KroneckerOperator((sp.identity(n1),), (sp.identity(n2),))


def test_lowrank_factors_validation():
    with pytest.raises(ValueError):
        LowRankFactors(np.ones((3, 2)), np.ones((4, 3)))
    F = LowRankFactors(np.ones(3), np.ones(4))
    assert F.rank == 1 and F.shape == (3, 4)
    assert LowRankFactors.zeros(3, 4).rank == 0
    with pytest.raises(ValueError):
        F.V[0, 0] = 2.0


def test_operator_shape_errors():
    with pytest.raises(ValueError):
        KroneckerOperator((sp.identity(3),), (sp.identity(2), sp.identity(2)))
    with pytest.raises(ValueError):
        KroneckerOperator((sp.identity(3), sp.identity(4)), (sp.identity(2), sp.identity(2)))
    op = identity_op(3, 2)
    with pytest.raises(ValueError):
        apply(op, np.ones((2, 3)))


def test_apply_identity_and_zero():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(apply(identity_op(4, 3), X), X)
    op = random_problem(rng, 4, 3).op
    np.testing.assert_array_equal(apply(op, np.zeros((4, 3))), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 3), st.integers(0, 2**31))
def test_apply_matches_explicit_kronecker(n1, n2, n_terms, seed):
    rng = np.random.default_rng(seed)
    K = tuple(sp.random(n1, n1, density=0.5, random_state=seed + i) + sp.identity(n1)
              for i in range(n_terms))
    G = tuple(sp.random(n2, n2, density=0.5, random_state=seed + 10 + i) + sp.identity(n2)
              for i in range(n_terms))
    op = KroneckerOperator(K, G)
    X = rng.standard_normal((n1, n2))
    expect = (dense_kron(op) @ X.reshape(-1, order="F")).reshape((n1, n2), order="F")
    assert rel(apply(op, X), expect) < 1e-12


def test_apply_lowrank():
    rng = np.random.default_rng(1)
    op = random_problem(rng, 7, 5, n_terms=3).op
    F = LowRankFactors(rng.standard_normal((7, 2)), rng.standard_normal((5, 2)))
    assert rel(apply_lowrank(op, F).full(), apply(op, F.full())) < 1e-12
    assert apply_lowrank(op, LowRankFactors.zeros(7, 5)).rank == 0
    same = apply_lowrank(identity_op(7, 5), F)
    np.testing.assert_array_equal(same.V, F.V)
    np.testing.assert_array_equal(same.W, F.W)


def test_frobenius_norms():
    e1 = np.zeros(5)
    e1[0] = 1.0
    assert frobenius_norm_lowrank(LowRankFactors(e1, e1)) == 1.0
    assert frobenius_norm_lowrank(LowRankFactors.zeros(5, 5)) == 0.0
    rng = np.random.default_rng(2)
    F = LowRankFactors(rng.standard_normal((20, 3)), rng.standard_normal((20, 3)))
    assert abs(frobenius_norm_lowrank(F) / np.linalg.norm(F.full()) - 1) < 1e-12
    assert frobenius_diff_lowrank(F, F) < 1e-12 * frobenius_norm_lowrank(F)
    assert frobenius_diff_lowrank(F, LowRankFactors.zeros(20, 20)) == pytest.approx(
        frobenius_norm_lowrank(F), rel=1e-14)
    G = LowRankFactors(rng.standard_normal((20, 2)), rng.standard_normal((20, 2)))
    assert abs(frobenius_diff_lowrank(F, G) / np.linalg.norm(F.full() - G.full()) - 1) < 1e-10
    with pytest.raises(ValueError):
        frobenius_diff_lowrank(F, LowRankFactors.zeros(20, 4))


def test_diff_norm_resolves_tiny_differences():
    # the Gram-matrix formula would round a 1e-10 relative change to zero
    rng = np.random.default_rng(3)
    F = LowRankFactors(rng.standard_normal((30, 4)), rng.standard_normal((20, 4)))
    D = LowRankFactors(1e-10 * rng.standard_normal((30, 1)), rng.standard_normal((20, 1)))
    G = LowRankFactors(np.hstack([F.V, D.V]), np.hstack([F.W, D.W]))
    assert frobenius_diff_lowrank(G, F) == pytest.approx(np.linalg.norm(D.full()), rel=1e-6)


def test_residual_norm():
    rng = np.random.default_rng(4)
    pr = random_problem(rng, 6, 4, n_terms=3)
    assert residual_norm(pr.op, LowRankFactors.zeros(6, 4), pr.rhs) == pytest.approx(
        np.linalg.norm(pr.rhs.full()), rel=1e-14)
    U = dense_solve(pr)
    Uf = LowRankFactors(U, np.eye(4))
    assert residual_norm(pr.op, Uf, pr.rhs) < 1e-10 * np.linalg.norm(pr.rhs.full())
    F = LowRankFactors(rng.standard_normal((6, 2)), rng.standard_normal((4, 2)))
    dense = np.linalg.norm(pr.rhs.full() - apply(pr.op, F.full()))
    assert abs(residual_norm(pr.op, F, pr.rhs) / dense - 1) < 1e-10


def test_a_inner_is_an_inner_product():
    rng = np.random.default_rng(5)
    pr = random_problem(rng, 6, 5, n_terms=3)
    for _ in range(50):
        X, Y, Z = (rng.standard_normal((6, 5)) for _ in range(3))
        assert a_inner(pr.op, X, X) > 0
        assert a_inner(pr.op, X, Y) == pytest.approx(a_inner(pr.op, Y, X), rel=1e-12)
        lhs = a_inner(pr.op, 2 * X + Z, Y)
        assert lhs == pytest.approx(2 * a_inner(pr.op, X, Y) + a_inner(pr.op, Z, Y), abs=1e-12 * abs(lhs) + 1e-12)
    X, Y = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    assert a_inner(identity_op(6, 5), X, Y) == pytest.approx(np.sum(X * Y), rel=1e-14)


def test_objective_rank_zero():
    rng = np.random.default_rng(6)
    pr = random_problem(rng, 5, 4)
    J, gV, gW = objective_and_gradients(pr.op, pr.rhs, LowRankFactors.zeros(5, 4))
    assert J == 0.0 and gV.shape == (5, 0) and gW.shape == (4, 0)


def test_gradients_vanish_at_full_rank_solution():
    rng = np.random.default_rng(7)
    pr = random_problem(rng, 5, 4, n_terms=3)
    F = LowRankFactors(dense_solve(pr), np.eye(4))
    _, gV, gW = objective_and_gradients(pr.op, pr.rhs, F)
    assert np.linalg.norm(gV) < 1e-8 and np.linalg.norm(gW) < 1e-8


def test_objective_matches_dense_formula():
    rng = np.random.default_rng(8)
    pr = random_problem(rng, 5, 4, n_terms=3)
    F = LowRankFactors(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)))
    X = F.full()
    J, _, _ = objective_and_gradients(pr.op, pr.rhs, F)
    assert J == pytest.approx(0.5 * a_inner(pr.op, X, X) - np.sum(pr.rhs.full() * X), rel=1e-12)


def test_orthonormalize():
    M = np.linalg.qr(np.random.default_rng(9).standard_normal((6, 3)))[0]
    M = M * np.sign(np.diag(np.linalg.qr(M)[1]))
    np.testing.assert_allclose(orthonormalize(M), M, atol=1e-14)
    e1 = np.eye(4)[:, :1]
    np.testing.assert_allclose(orthonormalize(np.hstack([e1, 2 * e1])), e1)
    R = np.random.default_rng(10).standard_normal((30, 7))
    Q = orthonormalize(R)
    assert np.linalg.norm(Q.T @ Q - np.eye(7)) < 1e-12
    assert orthonormalize(np.zeros((4, 2))).shape == (4, 0)
    assert orthonormalize(np.zeros((4, 0))).shape == (4, 0)


def test_compress():
    rng = np.random.default_rng(11)
    V = rng.standard_normal((12, 3))
    W = rng.standard_normal((9, 3))
    F = LowRankFactors(np.hstack([V, V[:, :1]]), np.hstack([W, W[:, :1]]))
    U, s, Z = compress(F)
    assert s.size == 3
    np.testing.assert_allclose(s, np.linalg.svd(F.full(), compute_uv=False)[:3], rtol=1e-12)
    assert rel((U * s) @ Z.T, F.full()) < 1e-12
