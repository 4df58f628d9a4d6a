import math

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.polynomial import legendre
from scipy.integrate import quad

from kronaem.sgfem import (
    DENSITIES,
    FastDecayCoefficients,
    GPCBasis,
    KLExpansion,
    assemble_G,
    assemble_K,
    assemble_load,
    assemble_rhs,
    build_benchmark,
    build_multi_index_set,
    exp_kernel_eigenpairs_1d,
    kl_eigenpairs,
    n_interior,
)

from helpers import dense_kron


# -- polynomial chaos -----------------------------------------------------------


@pytest.mark.parametrize("m,d,count", [(5, 3, 56), (20, 4, 10626), (24, 4, 20475), (1, 2, 3)])
def test_basis_sizes(m, d, count):
    assert build_multi_index_set(m, d).shape == (count, m)


def test_basis_counts_match_binomial():
    for m in range(1, 31):
        for d in range(6):
            if math.comb(m + d, d) > 50_000:
                continue
            idx = build_multi_index_set(m, d)
            assert idx.shape[0] == math.comb(m + d, d)
            assert len({tuple(r) for r in idx.tolist()}) == idx.shape[0]
            assert idx.min() >= 0 and idx.sum(axis=1).max() <= d


def test_basis_ordering():
    idx = build_multi_index_set(3, 2)
    deg = idx.sum(axis=1)
    assert np.all(np.diff(deg) >= 0)
    np.testing.assert_array_equal(idx[0], [0, 0, 0])
    np.testing.assert_array_equal(idx[1:4], np.eye(3, dtype=int))
    np.testing.assert_array_equal(build_multi_index_set(1, 2)[:, 0], [0, 1, 2])


def test_basis_errors():
    with pytest.raises(ValueError):
        build_multi_index_set(0, 2)
    with pytest.raises(OverflowError):
        build_multi_index_set(200, 10)
    with pytest.raises(ValueError):
        GPCBasis.total_degree(2, 2, "gaussian")


def _psi(k, y):
    """Orthonormal Legendre of degree k at y in [-1, 1] for the uniform law."""
    return math.sqrt(2 * k + 1) * legendre.legval(y, [0] * k + [1])


def _quadrature_G(basis, i):
    y, wq = legendre.leggauss(64)
    w = DENSITIES[basis.density]
    n = basis.size
    G = np.zeros((n, n))
    for s, a in enumerate(basis.indices):
        for t, b in enumerate(basis.indices):
            val = 1.0
            for j in range(basis.m):
                f = _psi(a[j], y) * _psi(b[j], y)
                if j == i:
                    f = f * w * y
                val *= 0.5 * np.sum(wq * f)
            G[s, t] = val
    return G


@pytest.mark.parametrize("density", ["sqrt3", "unit"])
def test_G_matches_quadrature(density):
    basis = GPCBasis.total_degree(2, 3, density)
    G = assemble_G(basis)
    np.testing.assert_array_equal(G[0].toarray(), np.eye(basis.size))
    for i in range(basis.m):
        np.testing.assert_allclose(G[i + 1].toarray(), _quadrature_G(basis, i), atol=1e-13)


def test_G_small_cases():
    G1 = assemble_G(GPCBasis.total_degree(1, 1, "sqrt3"))[1].toarray()
    np.testing.assert_allclose(G1, [[0, 1], [1, 0]], atol=1e-15)
    G1 = assemble_G(GPCBasis.total_degree(1, 1, "unit"))[1].toarray()
    assert G1[0, 1] == pytest.approx(1 / math.sqrt(3), rel=1e-14)


def test_G_structure():
    basis = GPCBasis.total_degree(4, 3)
    idx = basis.indices
    for i, g in enumerate(assemble_G(basis)[1:]):
        D = g.toarray()
        np.testing.assert_array_equal(D, D.T)
        assert np.all(np.diag(D) == 0)
        for s, t in zip(*np.nonzero(D)):
            diff = idx[s] - idx[t]
            assert abs(diff[i]) == 1 and np.count_nonzero(diff) == 1


# -- Karhunen-Loeve -------------------------------------------------------------


def _nystrom(c, n=512):
    x, w = legendre.leggauss(n)
    x, w = 0.5 * (x + 1), 0.5 * w
    C = np.exp(-np.abs(x[:, None] - x[None, :]) / c)
    sw = np.sqrt(w)
    lam, vec = np.linalg.eigh(sw[:, None] * C * sw[None, :])
    return x, w, lam[::-1], (vec / sw[:, None])[:, ::-1]


@pytest.mark.parametrize("c", [2.0, 0.5])
def test_kl_1d_eigenvalues_match_nystrom(c):
    # the kink of |s - t| limits Gauss-Nystrom accuracy to about 1e-3 here
    modes = exp_kernel_eigenpairs_1d(c, 10)
    _, _, lam, _ = _nystrom(c)
    np.testing.assert_allclose([m.lam for m in modes], lam[:10], rtol=1e-3)


@pytest.mark.parametrize("c", [2.0, 0.5])
def test_kl_1d_pairs_solve_integral_equation(c):
    for mode in exp_kernel_eigenpairs_1d(c, 8):
        for s in (0.0, 0.13, 0.5, 0.91):
            f = lambda t: math.exp(-abs(s - t) / c) * mode(t)
            lhs = quad(f, 0.0, s, epsabs=1e-13)[0] + quad(f, s, 1.0, epsabs=1e-13)[0]
            assert lhs == pytest.approx(mode.lam * mode(s), abs=1e-10)


@pytest.mark.parametrize("c", [2.0, 0.5])
def test_kl_1d_modes_match_nystrom(c):
    x, w, _, vec = _nystrom(c)
    for j, mode in enumerate(exp_kernel_eigenpairs_1d(c, 6)):
        phi = mode(x)
        assert np.sum(w * phi * phi) == pytest.approx(1.0, abs=1e-10)
        v = vec[:, j]
        assert abs(np.sum(w * phi * v)) == pytest.approx(1.0, abs=1e-8)


def test_kl_kernel_reconstruction_and_trace():
    c = 2.0
    modes = exp_kernel_eigenpairs_1d(c, 50)
    rng = np.random.default_rng(0)
    s, t = rng.random(100), rng.random(100)
    approx = sum(m.lam * m(s) * m(t) for m in modes)
    assert np.max(np.abs(approx - np.exp(-np.abs(s - t) / c))) < 0.02
    lam = np.array([m.lam for m in exp_kernel_eigenpairs_1d(c, 2000)])
    partial = np.cumsum(lam)
    assert np.all(np.diff(partial) > 0) and partial[-1] < 1.0
    assert 1.0 - partial[-1] < 1e-3


def test_kl_2d_ordering():
    pairs = kl_eigenpairs(2.0, 5)
    lam = [p.lam for p in pairs]
    assert lam == sorted(lam, reverse=True)
    assert (pairs[0].j, pairs[0].k) == (1, 1)
    # equal products of distinct 1D modes come in (j,k), (k,j) pairs
    assert {(pairs[1].j, pairs[1].k), (pairs[2].j, pairs[2].k)} == {(1, 2), (2, 1)}
    assert pairs[1].lam == pytest.approx(pairs[2].lam, rel=1e-14)


def test_kl_root_bracketing_error():
    with pytest.raises(ValueError):
        exp_kernel_eigenpairs_1d(-1.0, 3)


def test_kl_expansion_coefficients():
    kl = KLExpansion.build(1.0, 0.1, 2.0, 3)
    coeffs = kl.coefficients()
    x = np.array([0.3])
    assert coeffs[0](x, x)[0] == 1.0
    first = kl.eigenpairs[0]
    assert coeffs[1](x, x)[0] == pytest.approx(0.1 * math.sqrt(first.lam) * first(x, x)[0])


# -- fast-decay coefficients ----------------------------------------------------


def test_fast_decay_indices():
    F = FastDecayCoefficients(4.0, 0.832, 6)
    assert (F.k(1), F.rho1(1), F.rho2(1)) == (1, 0, 1)
    assert F.alpha(2) / F.alpha(1) == pytest.approx(0.0625, rel=1e-14)
    x1, x2 = np.array([0.1, 0.7]), np.array([0.2, 0.4])
    np.testing.assert_allclose(F.coefficient(1)(x1, x2), 0.832 * np.cos(2 * np.pi * x2))
    # k(i) enumerates the diagonals of the (rho1, rho2) lattice
    got = [(F.rho1(i), F.rho2(i)) for i in range(1, 6)]
    assert got == [(0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]


def test_fast_decay_validation():
    with pytest.raises(ValueError):
        FastDecayCoefficients(4.0, 0.95, 3)
    with pytest.raises(ValueError):
        FastDecayCoefficients(1.0, 0.5, 3)


# -- finite elements ------------------------------------------------------------


def _q1_1d(n_cells):
    h = 1.0 / n_cells
    n = n_cells - 1
    K = (np.diag(2 * np.ones(n)) - np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)) / h
    M = (np.diag(4 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) * h / 6
    return K, M


def test_grid_sizes():
    assert n_interior(4) == 225 and n_interior(6) == 3969


def test_K0_constant_coefficient_matches_tensor_formula():
    L = 3
    K1d, M1d = _q1_1d(2**L)
    one = lambda x1, x2: np.ones_like(x1)
    K0 = assemble_K([one], L)[0].toarray()
    np.testing.assert_allclose(K0, np.kron(K1d, M1d) + np.kron(M1d, K1d), atol=1e-13)


def test_K0_interior_rows_sum_to_zero():
    L = 4
    K0 = assemble_K([lambda x1, x2: np.ones_like(x1)], L)[0]
    n = 2**L - 1
    sums = np.asarray(K0.sum(axis=1)).ravel().reshape(n, n)
    np.testing.assert_allclose(sums[1:-1, 1:-1], 0.0, atol=1e-13)


def _loop_assembly(a, L):
    """Element-by-element Q1 stiffness with 2x2 Gauss points, written independently."""
    N = 2**L
    h = 1.0 / N
    g = np.array([-1, 1]) / math.sqrt(3)
    A = np.zeros(((N + 1) ** 2, (N + 1) ** 2))
    for ex in range(N):
        for ey in range(N):
            nodes = [(ex, ey), (ex + 1, ey), (ex, ey + 1), (ex + 1, ey + 1)]
            ids = [i + j * (N + 1) for i, j in nodes]
            for gx in g:
                for gy in g:
                    px, py = (ex + 0.5 * (gx + 1)) * h, (ey + 0.5 * (gy + 1)) * h
                    aval = a(np.array(px), np.array(py))
                    grads = []
                    for i, j in nodes:
                        sx = 1 if i > ex else -1
                        sy = 1 if j > ey else -1
                        phx = 0.5 * (1 + sx * gx)
                        phy = 0.5 * (1 + sy * gy)
                        grads.append((sx * phy / h, sy * phx / h))
                    wgt = (h / 2) ** 2
                    for r in range(4):
                        for c in range(4):
                            A[ids[r], ids[c]] += wgt * aval * (grads[r][0] * grads[c][0] + grads[r][1] * grads[c][1])
    interior = [i + j * (N + 1) for j in range(1, N) for i in range(1, N)]
    return A[np.ix_(interior, interior)]


def test_K_matches_loop_assembly():
    L = 3
    a = lambda x1, x2: 1 + x1**2 * x2 + np.sin(3 * x1)
    K = assemble_K([lambda x1, x2: np.ones_like(x1), a], L)[1].toarray()
    np.testing.assert_allclose(K, _loop_assembly(a, L), atol=1e-12)


def test_K_warns_for_nonpositive_mean():
    with pytest.warns(RuntimeWarning):
        assemble_K([lambda x1, x2: -np.ones_like(x1)], 2)


def test_load_and_rhs():
    f0 = assemble_load(4)
    np.testing.assert_allclose(f0, (1 / 16) ** 2, rtol=1e-14)
    basis = GPCBasis.total_degree(3, 2)
    B = assemble_rhs(4, basis)
    np.testing.assert_array_equal(B.W[:, 0], np.eye(basis.size)[0])
    assert np.linalg.norm(B.full()) == pytest.approx(np.linalg.norm(f0), rel=1e-14)


def test_poisson_solve_with_mean_term():
    # K0 u = f0 against the tensor-product Q1 system for a = 1
    L = 4
    K1d, M1d = _q1_1d(2**L)
    K0 = assemble_K([lambda x1, x2: np.ones_like(x1)], L)[0]
    f0 = assemble_load(L)
    oracle = np.linalg.solve(np.kron(K1d, M1d) + np.kron(M1d, K1d), f0)
    u = sp.linalg.spsolve(K0.tocsc(), f0)
    assert np.max(np.abs(u - oracle)) < 1e-10


def test_build_benchmark():
    pr = build_benchmark("exp1", 4, 5, 3)
    assert (pr.n_x, pr.n_xi, pr.op.n_terms) == (225, 56, 6)
    with pytest.raises(ValueError):
        build_benchmark("exp3", 4, 5, 3)
    with pytest.raises(ValueError):
        build_benchmark("exp1", 4, 5, 3, alpha_bar=0.5)
    man = pr.manifest()
    assert man["n_x"] == 225 and man["n_xi"] == 56


@pytest.mark.parametrize("bench", ["exp1", "exp2", "fast-decay"])
def test_assembled_operator_is_spd(bench):
    pr = build_benchmark(bench, 3, 3, 2)
    assert pr.n_x * pr.n_xi <= 2000
    assert np.linalg.eigvalsh(dense_kron(pr.op))[0] > 0
    assert pr.lambda_max == pytest.approx(np.linalg.eigvalsh(dense_kron(pr.op))[-1], rel=1e-5)
