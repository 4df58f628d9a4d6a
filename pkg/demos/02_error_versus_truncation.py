"""How close does each solver get to the best rank-p approximation?

The dense solution is computed once; its SVD truncations are the yardstick.
The printed numbers are ratios of energy-norm errors, so 1.00 means the
solver found the optimal rank-p approximation.

Run:  python demos/02_error_versus_truncation.py   (about a minute)
"""
from kronaem import SolverConfig, build_benchmark, dense_reference, error_metrics, solve
from kronaem.diagnostics import svd_truncation_curve

problem = build_benchmark("exp1", 4, 5, 3)
ref = dense_reference(problem)
best = {p: e for p, e, _ in svd_truncation_curve(problem, ref, 40)}
checkpoints = list(range(5, 41, 5))

print("method      " + "".join(f"{p:>7d}" for p in checkpoints))
for method in ("stage-p", "r-stage-p", "pgd-gs", "pgd", "s-rank1"):
    ratios = {}

    def record(p, F):
        if p in best and p % 5 == 0:
            ratios[p] = error_metrics(problem, ref, F).energy / best[p]

    cfg = SolverConfig(method=method, p_max=40, k_max=5, n_update=1, tau=1e-3,
                       epsilon=1e-15, tol_basis=1e-10, tol_coupled=1e-10, track_residual=False)
    solve(problem, cfg, record)
    print(f"{method:12s}" + "".join(f"{ratios[p]:7.2f}" for p in checkpoints))
