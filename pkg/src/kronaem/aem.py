"""Alternating energy minimization solvers for ``sum_i K_i U G_i^T = B``.

All methods build ``U_p = V_p W_p^T`` and minimize the energy error
``1/2 ||U - V W^T||_A^2`` by alternating linear solves for one factor with
the other fixed.

* ``stage-p``: at outer step ``p`` all ``p`` columns are recomputed from a
  singular-value-projection start by ``k_max`` coupled alternations.
* ``s-rank1``: each outer step appends one rank-one correction.
* ``pgd``, ``pgd-gs``, ``r-stage-p``: the rank-one scheme plus an
  enhancement applied every ``n_update`` steps and before accepting a stop.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .krylov import (
    FactorizationError,
    IndefiniteSystemError,
    PcgConfig,
    build_system,
    pcg_solve,
)
from .sgfem import GalerkinProblem
from .tensor_core import (
    LowRankFactors,
    apply_lowrank,
    compress,
    frobenius_diff_lowrank,
    frobenius_norm_lowrank,
    orthonormalize,
    residual_norm,
)

logger = logging.getLogger(__name__)

METHODS = ("stage-p", "s-rank1", "pgd", "pgd-gs", "r-stage-p")
ENHANCEMENTS = ("pgd", "pgd-gs", "r-stage-p")


class SolverError(RuntimeError):
    """A solve failed; ``trace`` holds the outer iterations completed so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    """Outer-iteration and PCG parameters.

    ``tol_coupled`` defaults to ``100 * epsilon``. ``tol_basis`` is used for
    rank-one and PGD/GS solves, ``tol_coupled`` for the reduced coupled
    systems of PGD-update, R-stage-p and Stage-p.

    ``svp_step`` is the gradient step of the Stage-p start. ``"normalized"``
    uses ``0.75 / lambda_max(A)``, the 3/4 step for the operator scaled to
    unit spectral norm; a number is used as the step as is.
    """

    method: str = "r-stage-p"
    p_max: int = 1000
    k_max: int = 2
    n_update: int = 5
    epsilon: float = 1e-8
    tau: float = 0.05
    tol_basis: float = 1e-5
    tol_coupled: Optional[float] = None
    seed: int = 0
    pcg_max_iters: int = 1000
    pgd_side: str = "w"
    svp_step: object = "normalized"
    track_residual: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        for name in ("p_max", "k_max", "n_update", "pcg_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epsilon", "tau", "tol_basis"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tol_coupled is not None and not self.tol_coupled > 0:
            raise ValueError(f"tol_coupled must be positive, got {self.tol_coupled}")
        if self.svp_step != "normalized":
            try:
                step = float(self.svp_step)
            except (TypeError, ValueError):
                raise ValueError(f"svp_step must be 'normalized' or a number, got {self.svp_step!r}")
            if not step > 0:
                raise ValueError(f"svp_step must be positive, got {step}")
            object.__setattr__(self, "svp_step", step)
        if self.pgd_side not in ("v", "w", "auto"):
            raise ValueError(f"pgd_side must be 'v', 'w' or 'auto', got {self.pgd_side!r}")

    @property
    def coupled_tol(self) -> float:
        return 1e2 * self.epsilon if self.tol_coupled is None else self.tol_coupled


@dataclass
class TraceRecord:
    p: int
    rel_diff: float
    relres: float
    enhanced: bool
    selected: int
    pcg_iters: int
    seconds: float


TRACE_HEADER = ("p", "rel_diff", "relres", "enhanced", "selected", "pcg_iters", "seconds")


@dataclass
class ConvergenceTrace:
    """One record per outer iteration."""

    records: list = field(default_factory=list)
    stopped: bool = False

    def append(self, rec: TraceRecord):
        if self.records and rec.p <= self.records[-1].p:
            raise ValueError("trace records must have strictly increasing p")
        self.records.append(rec)

    @property
    def p_final(self) -> int:
        return self.records[-1].p if self.records else 0

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([
                r.p,
                repr(float(r.rel_diff)),
                "" if math.isnan(r.relres) else repr(float(r.relres)),
                int(r.enhanced),
                r.selected,
                r.pcg_iters,
                f"{r.seconds:.6f}" if include_timing else "",
            ])
        return buf.getvalue()


@dataclass
class SolveStats:
    """Work counters for one outer iteration."""

    pcg_iters: int = 0
    selected: int = 0

    def reset(self):
        self.pcg_iters = 0
        self.selected = 0


def _solve(problem, row, side, fixed, rhs, tol, max_iters, X0=None, stats=None):
    sys = build_system(problem, row, side, fixed, rhs)
    res = pcg_solve(sys, PcgConfig(tol, max_iters), X0)
    if stats is not None:
        stats.pcg_iters += res.iters
    return res.X


def _random_unit(rng, n):
    w = rng.standard_normal(n)
    return w / np.linalg.norm(w)


# ---------------------------------------------------------------------------
# rank-one correction
# ---------------------------------------------------------------------------


def rank_one_correction(problem: GalerkinProblem, F: LowRankFactors, k_max: int, rng,
                        *, tol: float = 1e-5, max_iters: int = 1000,
                        stats: Optional[SolveStats] = None, w0=None):
    """New pair ``(v_p, w_p)`` minimizing the energy error with ``F`` fixed.

    Alternates ``k_max`` times between
    ``sum_i (w^T G_i w) K_i v = B w - A(V W^T) w`` and its mirror for ``w``,
    starting from a random unit ``w`` drawn from ``rng`` (or ``w0``).
    """
    op, B = problem.op, problem.rhs
    KV = [k @ F.V for k in op.K]
    GW = [g @ F.W for g in op.G]
    w = _random_unit(rng, op.n2) if w0 is None else np.asarray(w0, dtype=np.float64).ravel()
    retried = False
    k = 0
    while k < k_max:
        if k == 0 and not any(w @ (g @ w) for g in op.G):
            # every w^T G_i w vanishes, so the v-system matrix is zero
            if retried:
                raise IndefiniteSystemError("rank-one v-system is singular after reinitialization")
            logger.warning("singular rank-one system; drawing a new initial w")
            w = _random_unit(rng, op.n2)
            retried = True
            continue
        rhs_v = B.V @ (B.W.T @ w)
        for kv, gw in zip(KV, GW):
            rhs_v -= kv @ (gw.T @ w)
        try:
            v = _solve(problem, "s-rank1", "v", w, rhs_v[:, None], tol, max_iters, stats=stats)[:, 0]
        except IndefiniteSystemError:
            if k > 0 or retried:
                raise
            logger.warning("singular rank-one system; drawing a new initial w")
            w = _random_unit(rng, op.n2)
            retried = True
            continue
        if not np.any(v):
            return np.zeros(op.n1), np.zeros(op.n2)
        rhs_w = B.W @ (B.V.T @ v)
        for kv, gw in zip(KV, GW):
            rhs_w -= gw @ (kv.T @ v)
        w = _solve(problem, "s-rank1", "w", v, rhs_w[None, :], tol, max_iters, stats=stats)[0]
        k += 1
    return v, w


# ---------------------------------------------------------------------------
# convergence test
# ---------------------------------------------------------------------------


class ConvergenceCheck(NamedTuple):
    stop: bool
    F: LowRankFactors
    rel_diff: float
    enhanced: bool


def _relative_change(F_new: LowRankFactors, F_old: LowRankFactors) -> float:
    nrm = frobenius_norm_lowrank(F_new)
    if nrm == 0.0:
        return 0.0
    r = F_old.rank
    if (
        0 < r < F_new.rank
        and np.array_equal(F_new.V[:, :r], F_old.V)
        and np.array_equal(F_new.W[:, :r], F_old.W)
    ):
        # only appended columns changed
        diff = frobenius_norm_lowrank(LowRankFactors(F_new.V[:, r:], F_new.W[:, r:]))
    else:
        diff = frobenius_diff_lowrank(F_new, F_old)
    return diff / nrm


def check_convergence(problem: GalerkinProblem, F_new: LowRankFactors, F_old: LowRankFactors,
                      epsilon: float, enhancement: Optional[Callable] = None) -> ConvergenceCheck:
    """Stop test ``||U_p - U_{p-1}||_F <= epsilon ||U_p||_F``.

    When the test passes and an enhancement is given, the enhancement is
    applied once and the test repeated against the same ``F_old``; the run
    stops only if it still passes. A zero iterate always stops.
    """
    if frobenius_norm_lowrank(F_new) == 0.0:
        return ConvergenceCheck(True, F_new, 0.0, False)
    rel = _relative_change(F_new, F_old)
    if rel > epsilon:
        return ConvergenceCheck(False, F_new, rel, False)
    if enhancement is None:
        return ConvergenceCheck(True, F_new, rel, False)
    F_enh = enhancement(problem, F_new)
    if frobenius_norm_lowrank(F_enh) == 0.0:
        return ConvergenceCheck(True, F_enh, 0.0, True)
    rel = _relative_change(F_enh, F_old)
    return ConvergenceCheck(rel <= epsilon, F_enh, rel, True)


# ---------------------------------------------------------------------------
# enhancements
# ---------------------------------------------------------------------------


def pgd_update(problem: GalerkinProblem, F: LowRankFactors, *, tol: float = 1e-6,
               max_iters: int = 1000, side: str = "w",
               stats: Optional[SolveStats] = None) -> LowRankFactors:
    """Re-solve one factor with the other orthonormalized and fixed.

    ``side="w"`` (default) solves
    ``sum_i (Vt^T K_i Vt) W^T G_i^T = Vt^T B`` with ``Vt = orth(V)``;
    ``side="v"`` is the mirror, and ``"auto"`` updates ``V`` when
    ``n1 < n2``.
    """
    if F.rank == 0:
        return F
    B = problem.rhs
    if side == "auto":
        side = "v" if problem.n_x < problem.n_xi else "w"
    if side == "w":
        Vt = orthonormalize(F.V)
        rhs = (Vt.T @ B.V) @ B.W.T
        X0 = (Vt.T @ F.V) @ F.W.T
        WT = _solve(problem, "pgd", "w", Vt, rhs, tol, max_iters, X0, stats)
        return LowRankFactors(Vt, WT.T)
    if side == "v":
        Wt = orthonormalize(F.W)
        rhs = B.V @ (B.W.T @ Wt)
        X0 = F.V @ (F.W.T @ Wt)
        V = _solve(problem, "pgd", "v", Wt, rhs, tol, max_iters, X0, stats)
        return LowRankFactors(V, Wt)
    raise ValueError(f"side must be 'v', 'w' or 'auto', got {side!r}")


def pgd_gs_update(problem: GalerkinProblem, F: LowRankFactors, *, tol: float = 1e-5,
                  max_iters: int = 1000,
                  stats: Optional[SolveStats] = None) -> LowRankFactors:
    """One Gauss-Seidel sweep over the pairs ``l = 1..p``.

    Pair ``l`` is re-solved as a rank-one alternation (``v`` then ``w``)
    against the other pairs, using already updated pairs ``i < l``.
    """
    op, B = problem.op, problem.rhs
    V = np.array(F.V)
    W = np.array(F.W)
    KV = [k @ V for k in op.K]
    GW = [g @ W for g in op.G]
    for l in range(F.rank):
        w = W[:, l]
        rhs_v = B.V @ (B.W.T @ w)
        for kv, gw in zip(KV, GW):
            rhs_v -= kv @ (gw.T @ w) - kv[:, l] * (gw[:, l] @ w)
        v = _solve(problem, "pgd-gs", "v", w, rhs_v[:, None], tol, max_iters,
                   V[:, l:l + 1], stats)[:, 0]
        V[:, l] = v
        for i, k in enumerate(op.K):
            KV[i][:, l] = k @ v
        rhs_w = B.W @ (B.V.T @ v)
        for kv, gw in zip(KV, GW):
            rhs_w -= gw @ (kv.T @ v) - gw[:, l] * (kv[:, l] @ v)
        if np.any(v):
            w = _solve(problem, "pgd-gs", "w", v, rhs_w[None, :], tol, max_iters,
                       W[:, l][None, :], stats)[0]
        else:
            w = np.zeros_like(w)
        W[:, l] = w
        for i, g in enumerate(op.G):
            GW[i][:, l] = g @ w
    return LowRankFactors(V, W)


def select_pairs(F: LowRankFactors, tau: float) -> list:
    """Earlier pairs ``i < p`` whose directions are far from orthogonal to pair ``p``.

    Returns the 0-based indices with ``|cos(v_i, v_p)| > tau`` or
    ``|cos(w_i, w_p)| > tau``.
    """
    p = F.rank
    if p < 2:
        return []
    Vn = F.V / _col_norms(F.V)
    Wn = F.W / _col_norms(F.W)
    beta_v = Vn[:, :-1].T @ Vn[:, -1]
    beta_w = Wn[:, :-1].T @ Wn[:, -1]
    return [i for i in range(p - 1) if abs(beta_v[i]) > tau or abs(beta_w[i]) > tau]


def _col_norms(M):
    n = np.linalg.norm(M, axis=0)
    n[n == 0] = 1.0
    return n


def r_stage_p_update(problem: GalerkinProblem, F: LowRankFactors, tau: float, *,
                     tol: float = 1e-6, max_iters: int = 1000,
                     stats: Optional[SolveStats] = None) -> LowRankFactors:
    """Coupled re-solve of the newest pair and the earlier pairs aligned with it.

    The updated set is ``select_pairs(F, tau)`` plus the newest pair; the
    remaining pairs are held fixed and moved to the right-hand side. One
    alternation is done: ``V`` for the orthonormalized ``W`` of the set, then
    ``W`` for the orthonormalized new ``V``.
    """
    p = F.rank
    if p == 0:
        return F
    op, B = problem.op, problem.rhs
    chosen = select_pairs(F, tau)
    if stats is not None:
        stats.selected = len(chosen)
    sel = chosen + [p - 1]
    comp = [i for i in range(p) if i not in set(sel)]
    Vc, Wc = F.V[:, comp], F.W[:, comp]
    KVc = [k @ Vc for k in op.K]
    GWc = [g @ Wc for g in op.G]

    Wt = orthonormalize(F.W[:, sel])
    if Wt.shape[1] == 0:
        return LowRankFactors(Vc, Wc)
    rhs_v = B.V @ (B.W.T @ Wt)
    for kv, gw in zip(KVc, GWc):
        rhs_v -= kv @ (gw.T @ Wt)
    X0 = F.V[:, sel] @ (F.W[:, sel].T @ Wt)
    Vbar = _solve(problem, "r-stage-p", "v", Wt, rhs_v, tol, max_iters, X0, stats)

    Vt = orthonormalize(Vbar)
    if Vt.shape[1] == 0:
        return LowRankFactors(Vc, Wc)
    rhs_w = (Vt.T @ B.V) @ B.W.T
    for kv, gw in zip(KVc, GWc):
        rhs_w -= (Vt.T @ kv) @ gw.T
    X0w = (Vt.T @ Vbar) @ Wt.T
    WbarT = _solve(problem, "r-stage-p", "w", Vt, rhs_w, tol, max_iters, X0w, stats)

    q = Vt.shape[1]
    V = np.array(F.V)
    W = np.array(F.W)
    V[:, sel[:q]] = Vt
    W[:, sel[:q]] = WbarT.T
    keep = np.ones(p, dtype=bool)
    keep[sel[q:]] = False
    return LowRankFactors(V[:, keep], W[:, keep])


def make_enhancement(name: Optional[str], cfg: SolverConfig, stats: Optional[SolveStats] = None):
    """Bind an enhancement to the tolerances of ``cfg``: ``f(problem, F) -> F``."""
    if name is None:
        return None
    if name == "pgd":
        return lambda pr, F: pgd_update(pr, F, tol=cfg.coupled_tol, max_iters=cfg.pcg_max_iters,
                                        side=cfg.pgd_side, stats=stats)
    if name == "pgd-gs":
        return lambda pr, F: pgd_gs_update(pr, F, tol=cfg.tol_basis, max_iters=cfg.pcg_max_iters,
                                           stats=stats)
    if name == "r-stage-p":
        return lambda pr, F: r_stage_p_update(pr, F, cfg.tau, tol=cfg.coupled_tol,
                                              max_iters=cfg.pcg_max_iters, stats=stats)
    raise ValueError(f"unknown enhancement {name!r}; choose from {ENHANCEMENTS}")


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


class _Recorder:
    def __init__(self, problem, cfg):
        self.problem = problem
        self.cfg = cfg
        self.trace = ConvergenceTrace()
        self.t0 = time.perf_counter()
        self.bnorm = frobenius_norm_lowrank(problem.rhs)

    def record(self, p, F, check, enhanced, stats):
        if self.cfg.track_residual and self.bnorm > 0:
            relres = residual_norm(self.problem.op, F, self.problem.rhs) / self.bnorm
        else:
            relres = float("nan")
        self.trace.append(TraceRecord(
            p, check.rel_diff, relres, enhanced or check.enhanced, stats.selected,
            stats.pcg_iters, time.perf_counter() - self.t0,
        ))


def enhanced_aem(problem: GalerkinProblem, cfg: SolverConfig, enhancement: Optional[str] = None,
                 callback: Optional[Callable] = None):
    """Successive rank-one corrections with an optional periodic enhancement.

    ``enhancement`` is one of ``"pgd"``, ``"pgd-gs"``, ``"r-stage-p"`` or
    ``None`` (plain successive rank-one). It runs whenever
    ``p % n_update == 0`` and inside the convergence test. ``callback(p, F)``
    is called after every outer iteration. Returns ``(F, trace)``.
    """
    rng = np.random.default_rng(cfg.seed)
    stats = SolveStats()
    enh = make_enhancement(enhancement, cfg, stats)
    rec = _Recorder(problem, cfg)
    F = LowRankFactors.zeros(problem.n_x, problem.n_xi)
    try:
        for p in range(1, cfg.p_max + 1):
            stats.reset()
            v, w = rank_one_correction(problem, F, cfg.k_max, rng, tol=cfg.tol_basis,
                                       max_iters=cfg.pcg_max_iters, stats=stats)
            F_new = F.append(v, w) if np.any(v) and np.any(w) else F
            enhanced = False
            if enh is not None and p % cfg.n_update == 0:
                F_new = enh(problem, F_new)
                enhanced = True
            check = check_convergence(problem, F_new, F, cfg.epsilon, enh)
            F = check.F
            rec.record(p, F, check, enhanced, stats)
            if callback is not None:
                callback(p, F)
            if check.stop:
                rec.trace.stopped = True
                break
    except (IndefiniteSystemError, FactorizationError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"solver failed at outer iteration {len(rec.trace) + 1}: {exc}",
                          rec.trace) from exc
    return F, rec.trace


def s_rank1_aem(problem: GalerkinProblem, cfg: SolverConfig, callback: Optional[Callable] = None):
    """Successive rank-one AEM without enhancement."""
    return enhanced_aem(problem, cfg, None, callback)


def _svp(problem: GalerkinProblem, F_prev: LowRankFactors, p: int, rng=None, step=0.75):
    """Leading ``p`` singular triplets of ``U - step (A(U) - B)`` for ``U = F_prev``."""
    AF = apply_lowrank(problem.op, F_prev)
    B = problem.rhs
    stack = LowRankFactors(
        np.hstack([F_prev.V, -step * AF.V, step * B.V]),
        np.hstack([F_prev.W, AF.W, B.W]),
    )
    U, s, Z = compress(stack)
    r = min(len(s), p)
    U, s, Z = U[:, :r], s[:r], Z[:, :r]
    if r < p:
        rng = np.random.default_rng(0) if rng is None else rng
        U = _pad_orthonormal(U, p, rng)
        Z = _pad_orthonormal(Z, p, rng)
        s = np.concatenate([s, np.zeros(p - r)])
    return U, s, Z


def _pad_orthonormal(Q, p, rng):
    n, r = Q.shape
    if p > n:
        raise ValueError(f"cannot build {p} orthonormal columns in dimension {n}")
    extra = rng.standard_normal((n, p - r))
    extra -= Q @ (Q.T @ extra)
    extra -= Q @ (Q.T @ extra)
    return np.hstack([Q, orthonormalize(extra)])


def svp_step_size(problem: GalerkinProblem, cfg: SolverConfig) -> float:
    if cfg.svp_step == "normalized":
        return 0.75 / problem.lambda_max
    return float(cfg.svp_step)


def svp_init(problem: GalerkinProblem, F_prev: LowRankFactors, p: int, rng=None, step=0.75):
    """Stage-``p`` start: leading ``p`` left/right singular vectors of the SVP step.

    Both returned matrices are orthonormal; singular values are not
    absorbed. Missing directions (numerical rank below ``p``) are filled with
    random orthonormal columns orthogonal to the computed ones.
    """
    U, _, Z = _svp(problem, F_prev, p, rng, step)
    return U, Z


def stage_p_aem(problem: GalerkinProblem, cfg: SolverConfig, callback: Optional[Callable] = None):
    """Stage-``p`` AEM: recompute all ``p`` pairs at each outer iteration.

    Each stage starts from :func:`svp_init` and runs exactly ``k_max``
    alternations of the coupled ``V`` and ``W`` solves, orthonormalizing the
    fixed factor before each solve. ``p`` is capped at ``min(n1, n2)``.
    Returns ``(F, trace)``.
    """
    rng = np.random.default_rng(cfg.seed)
    B = problem.rhs
    stats = SolveStats()
    rec = _Recorder(problem, cfg)
    tol = cfg.coupled_tol
    F = LowRankFactors.zeros(problem.n_x, problem.n_xi)
    p_cap = min(cfg.p_max, problem.n_x, problem.n_xi)
    step = svp_step_size(problem, cfg)
    try:
        for p in range(1, p_cap + 1):
            stats.reset()
            U0, s0, Z0 = _svp(problem, F, p, rng, step)
            V, W = U0 * s0, Z0
            for _ in range(cfg.k_max):
                Wt = orthonormalize(W)
                X0 = V @ (W.T @ Wt)
                rhs_v = B.V @ (B.W.T @ Wt)
                V = _solve(problem, "stage-p", "v", Wt, rhs_v, tol, cfg.pcg_max_iters, X0, stats)
                Vt = orthonormalize(V)
                if Vt.shape[1] == 0:
                    V, W = Vt, np.zeros((problem.n_xi, 0))
                    break
                rhs_w = (Vt.T @ B.V) @ B.W.T
                X0w = (Vt.T @ V) @ Wt.T
                WT = _solve(problem, "stage-p", "w", Vt, rhs_w, tol, cfg.pcg_max_iters, X0w, stats)
                V, W = Vt, WT.T
            F_new = LowRankFactors(V, W)
            check = check_convergence(problem, F_new, F, cfg.epsilon, None)
            F = check.F
            rec.record(p, F, check, False, stats)
            if callback is not None:
                callback(p, F)
            if check.stop:
                rec.trace.stopped = True
                break
    except (IndefiniteSystemError, FactorizationError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"solver failed at outer iteration {len(rec.trace) + 1}: {exc}",
                          rec.trace) from exc
    return F, rec.trace


def solve(problem: GalerkinProblem, cfg: SolverConfig, callback: Optional[Callable] = None):
    """Run ``cfg.method``; returns ``(F, trace)``."""
    if cfg.method == "stage-p":
        return stage_p_aem(problem, cfg, callback)
    if cfg.method == "s-rank1":
        return s_rank1_aem(problem, cfg, callback)
    return enhanced_aem(problem, cfg, cfg.method, callback)
