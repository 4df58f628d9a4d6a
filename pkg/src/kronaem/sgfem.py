"""Stochastic Galerkin assembly for the diffusion benchmarks.

Builds ``sum_i G_i kron K_i`` systems for ``-div(a(x, xi) grad u) = 1`` on the
unit square with homogeneous Dirichlet data, where the coefficient is affine,
``a = a_0(x) + sum_i a_i(x) xi_i``, in independent uniform random variables.

* ``K_i``: Q1 stiffness matrices on a uniform ``2^L x 2^L`` mesh restricted to
  interior nodes (lexicographic, ``x1`` fastest).
* ``G_i``: Galerkin matrices of a total-degree orthonormal Legendre basis.
* The right-hand side is the rank-one ``f_0 g_0^T``.
"""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla_sparse
from scipy.optimize import brentq
from scipy.special import zeta

from .tensor_core import KroneckerOperator, LowRankFactors, as_sparse

#: Half-widths of the supported uniform laws U(-w, w).
DENSITIES = {"sqrt3": math.sqrt(3.0), "unit": 1.0}

MAX_BASIS_SIZE = 10_000_000

BENCHMARKS = ("exp1", "exp2", "fast-decay")

_BENCHMARK_DEFAULTS = {
    "exp1": {"mu": 1.0, "sigma": 0.1, "c": 2.0},
    "exp2": {"mu": 1.0, "sigma": 0.2, "c": 0.5},
    "fast-decay": {"sigma_decay": 4.0, "alpha_bar": 0.832},
}


# ---------------------------------------------------------------------------
# polynomial chaos
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GPCBasis:
    """Total-degree multivariate Legendre basis, orthonormal in ``density``."""

    m: int
    d_tot: int
    indices: np.ndarray
    density: str = "sqrt3"

    def __post_init__(self):
        if self.density not in DENSITIES:
            raise ValueError(f"unknown density {self.density!r}; use one of {sorted(DENSITIES)}")

    @classmethod
    def total_degree(cls, m: int, d_tot: int, density: str = "sqrt3") -> "GPCBasis":
        return cls(m, d_tot, build_multi_index_set(m, d_tot), density)

    @property
    def size(self) -> int:
        return self.indices.shape[0]


def _compositions(total: int, parts: int):
    # descending lexicographic order
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def build_multi_index_set(m: int, d_tot: int) -> np.ndarray:
    """All multi-indices in ``N_0^m`` of total degree ``<= d_tot``.

    Graded ordering: by total degree, and within a degree in descending
    lexicographic order, so the zero index comes first followed by
    ``e_1, ..., e_m``. Returns an ``(n_xi, m)`` integer array with
    ``n_xi = binomial(m + d_tot, d_tot)``.
    """
    if m < 1 or d_tot < 0:
        raise ValueError(f"need m >= 1 and d_tot >= 0, got m={m}, d_tot={d_tot}")
    count = math.comb(m + d_tot, d_tot)
    if count > MAX_BASIS_SIZE:
        raise OverflowError(f"basis size {count} exceeds the limit {MAX_BASIS_SIZE}")
    out = np.empty((count, m), dtype=np.int64)
    row = 0
    for t in range(d_tot + 1):
        for c in _compositions(t, m):
            out[row] = c
            row += 1
    return out


def legendre_recurrence(n: int, density: str = "sqrt3") -> np.ndarray:
    """Off-diagonal Jacobi coefficients ``b_1..b_n`` of orthonormal Legendre.

    ``xi * pi_k = b_{k+1} pi_{k+1} + b_k pi_{k-1}`` for the uniform law on
    ``(-w, w)``: ``b_k = w * k / sqrt(4 k^2 - 1)``.
    """
    k = np.arange(1, n + 1, dtype=np.float64)
    return DENSITIES[density] * k / np.sqrt(4.0 * k * k - 1.0)


def assemble_G(basis: GPCBasis) -> list:
    """``G_0 = <psi_s psi_t>`` (the identity) and ``G_i = <xi_i psi_s psi_t>``."""
    idx = basis.indices
    n = basis.size
    lookup = {tuple(row): s for s, row in enumerate(idx.tolist())}
    b = legendre_recurrence(max(basis.d_tot, 1), basis.density)
    degree = idx.sum(axis=1)
    mats = [sp.identity(n, format="csr")]
    for i in range(basis.m):
        rows, cols, vals = [], [], []
        for s in np.flatnonzero(degree < basis.d_tot):
            d = list(idx[s])
            k = d[i]
            d[i] = k + 1
            t = lookup[tuple(d)]
            rows += [s, t]
            cols += [t, s]
            vals += [b[k], b[k]]
        mats.append(as_sparse(sp.coo_matrix((vals, (rows, cols)), shape=(n, n))))
    return mats


# ---------------------------------------------------------------------------
# Karhunen-Loeve modes of the separable exponential kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpKernelMode1D:
    """Eigenpair of ``int_0^1 exp(-|s - t| / c) phi(t) dt`` with unit L2 norm."""

    lam: float
    omega: float
    even: bool
    c: float
    norm: float

    def __call__(self, s):
        x = np.asarray(s, dtype=np.float64) - 0.5
        wave = np.cos(self.omega * x) if self.even else np.sin(self.omega * x)
        return wave / self.norm


@dataclass(frozen=True)
class KLMode:
    """Product eigenpair ``phi(x) = phi_j(x1) phi_k(x2)`` on the unit square."""

    lam: float
    j: int
    k: int
    first: ExpKernelMode1D
    second: ExpKernelMode1D

    def __call__(self, x1, x2):
        return self.first(x1) * self.second(x2)


def exp_kernel_eigenpairs_1d(c: float, n: int, xtol: float = 1e-12) -> list:
    """Leading ``n`` eigenpairs of the exponential kernel on ``[0, 1]``.

    On the centred interval ``(-1/2, 1/2)`` the modes alternate between
    ``cos(w x)`` with ``w tan(w/2) = 1/c`` and ``sin(w x)`` with
    ``w + tan(w/2)/c = 0``; the ``j``-th frequency lies in
    ``((j-1) pi, j pi)`` and the eigenvalue is ``2c / (1 + c^2 w^2)``.
    """
    if c <= 0 or n < 1:
        raise ValueError(f"need c > 0 and n >= 1, got c={c}, n={n}")
    b = 1.0 / c

    def even_eq(w):
        return b * np.cos(w / 2) - w * np.sin(w / 2)

    def odd_eq(w):
        return w * np.cos(w / 2) + b * np.sin(w / 2)

    modes = []
    for j in range(1, n + 1):
        even = j % 2 == 1
        f = even_eq if even else odd_eq
        lo, hi = (j - 1) * math.pi, j * math.pi
        flo, fhi = f(lo), f(hi)
        if not np.sign(flo) * np.sign(fhi) < 0:
            raise RuntimeError(
                f"no sign change for mode {j} on [{lo}, {hi}]: f(lo)={flo}, f(hi)={fhi}"
            )
        w = brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps)
        if even:
            norm2 = 0.5 + math.sin(w) / (2 * w)
        else:
            norm2 = 0.5 - math.sin(w) / (2 * w)
        lam = 2 * c / (1 + c * c * w * w)
        modes.append(ExpKernelMode1D(lam, w, even, c, math.sqrt(norm2)))
    return modes


def kl_eigenpairs(c: float, m: int) -> list:
    """The ``m`` largest eigenpairs of ``exp(-|x1-y1|/c - |x2-y2|/c)``.

    Products of 1D pairs sorted by eigenvalue, descending; ties keep the
    lexicographic ``(j, k)`` order (1-based).
    """
    one_d = exp_kernel_eigenpairs_1d(c, m)
    cands = [
        (-one_d[j].lam * one_d[k].lam, j, k) for j in range(m) for k in range(m)
    ]
    cands.sort()
    return [
        KLMode(-negl, j + 1, k + 1, one_d[j], one_d[k]) for negl, j, k in cands[:m]
    ]


@dataclass(frozen=True)
class KLExpansion:
    """Truncated KL coefficient ``mu + sigma sum sqrt(lam_i) phi_i(x) xi_i``."""

    mu: float
    sigma: float
    c: float
    m: int
    eigenpairs: tuple = field(default=())

    @classmethod
    def build(cls, mu, sigma, c, m) -> "KLExpansion":
        return cls(mu, sigma, c, m, tuple(kl_eigenpairs(c, m)))

    def coefficients(self) -> list:
        out = [_constant(self.mu)]
        for mode in self.eigenpairs:
            out.append(_scaled(mode, self.sigma * math.sqrt(mode.lam)))
        return out


@dataclass(frozen=True)
class FastDecayCoefficients:
    """``a_i = alpha_i cos(2 pi r1(i) x1) cos(2 pi r2(i) x2)``, ``alpha_i = abar i^-s``."""

    sigma_decay: float
    alpha_bar: float
    m: int

    def __post_init__(self):
        if self.sigma_decay <= 1:
            raise ValueError(f"sigma_decay must exceed 1, got {self.sigma_decay}")
        bound = 1.0 / zeta(self.sigma_decay)
        if not 0 < self.alpha_bar < bound:
            raise ValueError(f"alpha_bar must lie in (0, {bound:.6g}), got {self.alpha_bar}")

    def alpha(self, i: int) -> float:
        return self.alpha_bar * i ** (-self.sigma_decay)

    @staticmethod
    def k(i: int) -> int:
        return math.floor(-0.5 + math.sqrt(0.25 + 2 * i))

    @classmethod
    def rho1(cls, i: int) -> int:
        k = cls.k(i)
        return i - k * (k + 1) // 2

    @classmethod
    def rho2(cls, i: int) -> int:
        return cls.k(i) - cls.rho1(i)

    def coefficient(self, i: int) -> Callable:
        a, r1, r2 = self.alpha(i), self.rho1(i), self.rho2(i)

        def a_i(x1, x2):
            return a * np.cos(2 * np.pi * r1 * x1) * np.cos(2 * np.pi * r2 * x2)

        return a_i

    def coefficients(self) -> list:
        return [_constant(1.0)] + [self.coefficient(i) for i in range(1, self.m + 1)]


def _constant(value):
    def a(x1, x2):
        return np.full(np.broadcast(x1, x2).shape, float(value))

    return a


def _scaled(mode, scale):
    def a(x1, x2):
        return scale * mode(x1, x2)

    return a


# ---------------------------------------------------------------------------
# Q1 finite elements
# ---------------------------------------------------------------------------

_LOCAL = np.array([(0, 0), (1, 0), (0, 1), (1, 1)])


@functools.lru_cache(maxsize=None)
def _mesh(grid_level: int):
    N = 2**grid_level
    ex, ey = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
    ex, ey = ex.ravel(), ey.ravel()
    nodes = np.stack(
        [(ex + dx) + (ey + dy) * (N + 1) for dx, dy in _LOCAL], axis=1
    )
    i, j = np.meshgrid(np.arange(1, N), np.arange(1, N), indexing="xy")
    interior = (i + j * (N + 1)).ravel()
    return N, ex, ey, nodes, interior


def _reference_rule(quad_order: int):
    """Gauss points on [-1, 1]^2 and the shape data of the four bilinears."""
    g, w = np.polynomial.legendre.leggauss(quad_order)
    xi, eta = np.meshgrid(g, g, indexing="xy")
    xi, eta = xi.ravel(), eta.ravel()
    wq = np.outer(w, w).ravel()
    sa = 2 * _LOCAL[:, 0] - 1
    sb = 2 * _LOCAL[:, 1] - 1
    shape = 0.25 * (1 + np.outer(xi, sa)) * (1 + np.outer(eta, sb))
    dxi = 0.25 * sa[None, :] * (1 + np.outer(eta, sb))
    deta = 0.25 * sb[None, :] * (1 + np.outer(xi, sa))
    return xi, eta, wq, shape, dxi, deta


def _eval(a, x1, x2):
    return np.broadcast_to(np.asarray(a(x1, x2), dtype=np.float64), x1.shape)


def assemble_K(coeffs: Sequence[Callable], grid_level: int, quad_order: int = 2) -> list:
    """Q1 stiffness matrices ``int a_i grad phi_k . grad phi_l`` on interior nodes.

    ``coeffs`` are vectorised callables ``a(x1, x2)``. Element integrals use a
    ``quad_order x quad_order`` Gauss rule.
    """
    if grid_level < 2:
        raise ValueError(f"grid_level must be >= 2, got {grid_level}")
    if quad_order not in (2, 3):
        raise ValueError(f"quad_order must be 2 or 3, got {quad_order}")
    N, ex, ey, nodes, interior = _mesh(grid_level)
    h = 1.0 / N
    xi, eta, wq, _, dxi, deta = _reference_rule(quad_order)
    # physical gradients scale by 2/h and the Jacobian is h^2/4: they cancel
    D = dxi[:, :, None] * dxi[:, None, :] + deta[:, :, None] * deta[:, None, :]
    x1 = (ex[:, None] + 0.5 * (1 + xi[None, :])) * h
    x2 = (ey[:, None] + 0.5 * (1 + eta[None, :])) * h
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    nn = (N + 1) ** 2
    out = []
    for i, a in enumerate(coeffs):
        vals = _eval(a, x1, x2) * wq[None, :]
        Ke = np.einsum("eq,qab->eab", vals, D)
        K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()
        K = as_sparse(K[interior][:, interior])
        if i == 0:
            _warn_if_not_spd(K)
        out.append(K)
    return out


def _warn_if_not_spd(K):
    # Gershgorin-free check: a nonpositive diagonal already rules out SPD
    if np.any(K.diagonal() <= 0):
        warnings.warn("mean stiffness matrix K_0 is not positive definite", RuntimeWarning)


def assemble_load(grid_level: int, f: Optional[Callable] = None, quad_order: int = 2) -> np.ndarray:
    """``int f phi_k`` on interior nodes; ``f = 1`` by default."""
    N, ex, ey, nodes, interior = _mesh(grid_level)
    h = 1.0 / N
    xi, eta, wq, shape, _, _ = _reference_rule(quad_order)
    if f is None:
        f = _constant(1.0)
    x1 = (ex[:, None] + 0.5 * (1 + xi[None, :])) * h
    x2 = (ey[:, None] + 0.5 * (1 + eta[None, :])) * h
    vals = _eval(f, x1, x2) * wq[None, :] * (h * h / 4)
    fe = vals @ shape
    b = np.bincount(nodes.ravel(), weights=fe.ravel(), minlength=(N + 1) ** 2)
    return b[interior]


def assemble_rhs(grid_level: int, basis: GPCBasis, quad_order: int = 2) -> LowRankFactors:
    """Rank-one right-hand side ``f_0 g_0^T`` for the forcing ``f = 1``."""
    f0 = assemble_load(grid_level, quad_order=quad_order)
    g0 = np.zeros(basis.size)
    g0[0] = 1.0
    return LowRankFactors(f0[:, None], g0[:, None])


def n_interior(grid_level: int) -> int:
    return (2**grid_level - 1) ** 2


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GalerkinProblem:
    """A matrix equation ``sum_i K_i U G_i^T = B`` with low-rank ``B``."""

    op: KroneckerOperator
    rhs: LowRankFactors
    n_x: int
    n_xi: int
    grid_level: Optional[int] = None
    basis: Optional[GPCBasis] = None
    benchmark: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.op.n1, self.op.n2) != (self.n_x, self.n_xi):
            raise ValueError(
                f"operator is {self.op.n1}x{self.op.n2}, declared {self.n_x}x{self.n_xi}"
            )
        if self.rhs.shape != (self.n_x, self.n_xi):
            raise ValueError(f"right-hand side has shape {self.rhs.shape}")
        if self.grid_level is not None and self.n_x != n_interior(self.grid_level):
            raise ValueError(f"n_x={self.n_x} does not match grid level {self.grid_level}")

    @property
    def m(self) -> int:
        return self.op.n_terms - 1

    @functools.cached_property
    def mean_factors(self):
        """Factorizations of ``K_0`` and ``G_0``, computed once per problem."""
        from .krylov import factorize

        return factorize(self.op.K[0]), factorize(self.op.G[0])

    @functools.cached_property
    def lambda_max(self) -> float:
        """Largest eigenvalue of the operator, from Lanczos with a fixed start vector."""
        from .tensor_core import apply

        N = self.n_x * self.n_xi
        if N <= 64:
            return float(np.linalg.eigvalsh(self.op.to_sparse().toarray())[-1])

        def mv(x):
            X = np.asarray(x).reshape((self.n_x, self.n_xi), order="F")
            return apply(self.op, X).reshape(-1, order="F")

        A = spla_sparse.LinearOperator((N, N), matvec=mv, dtype=np.float64)
        val = spla_sparse.eigsh(A, k=1, which="LA", v0=np.ones(N), tol=1e-6,
                                return_eigenvectors=False)
        return float(val[0])

    def manifest(self) -> dict:
        out = {
            "benchmark": self.benchmark,
            "grid_level": "" if self.grid_level is None else self.grid_level,
            "m": self.m,
            "d_tot": "" if self.basis is None else self.basis.d_tot,
            "n_x": self.n_x,
            "n_xi": self.n_xi,
            "density": "" if self.basis is None else self.basis.density,
        }
        out.update(self.params)
        return out


def _kl_positivity_check(kl: KLExpansion, width: float, grid_level: int):
    s = np.linspace(0, 1, 2**grid_level + 1)
    x1, x2 = np.meshgrid(s, s)
    worst = kl.mu - width * sum(
        np.abs(a(x1, x2)) for a in kl.coefficients()[1:]
    )
    if np.min(worst) <= 0:
        warnings.warn(
            "diffusion coefficient may lose positivity over the parameter range "
            f"(min of mu - w*sum|a_i| is {np.min(worst):.3g})",
            RuntimeWarning,
        )


def build_benchmark(
    benchmark: str,
    grid_level: int,
    m: int,
    d_tot: int,
    quad_order: int = 2,
    **overrides,
) -> GalerkinProblem:
    """Assemble one of the benchmark problems ``exp1``, ``exp2``, ``fast-decay``.

    ``exp1``/``exp2`` use the KL expansion of the separable exponential
    covariance with ``xi_i ~ U(-sqrt 3, sqrt 3)``; ``fast-decay`` uses the
    cosine coefficients with algebraic decay and ``xi_i ~ U(-1, 1)``.
    Keyword overrides replace the defaults (``mu``, ``sigma``, ``c`` or
    ``sigma_decay``, ``alpha_bar``).
    """
    if benchmark not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {benchmark!r}; choose from {BENCHMARKS}")
    params = dict(_BENCHMARK_DEFAULTS[benchmark])
    unknown = set(overrides) - set(params)
    if unknown:
        raise ValueError(f"unknown parameter(s) for {benchmark}: {sorted(unknown)}")
    params.update({k: float(v) for k, v in overrides.items()})
    if benchmark == "fast-decay":
        density = "unit"
        coeffs = FastDecayCoefficients(params["sigma_decay"], params["alpha_bar"], m).coefficients()
    else:
        density = "sqrt3"
        kl = KLExpansion.build(params["mu"], params["sigma"], params["c"], m)
        _kl_positivity_check(kl, DENSITIES[density], grid_level)
        coeffs = kl.coefficients()
    basis = GPCBasis.total_degree(m, d_tot, density)
    K = assemble_K(coeffs, grid_level, quad_order)
    G = assemble_G(basis)
    rhs = assemble_rhs(grid_level, basis, quad_order)
    return GalerkinProblem(
        KroneckerOperator(tuple(K), tuple(G)),
        rhs,
        n_interior(grid_level),
        basis.size,
        grid_level,
        basis,
        benchmark,
        params,
    )
