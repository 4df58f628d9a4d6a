"""Do the computed factors line up with the singular vectors of the solution?

For each solver the script reports how many of the leading isolated singular
directions are recovered with cosine above 0.99. Nearly equal singular values
form 2x2 blocks whose basis is not unique; those are skipped.

Run:  python demos/03_singular_directions.py
"""
import numpy as np

from kronaem import SolverConfig, build_benchmark, dense_reference, solve
from kronaem.diagnostics import angle_matrices, well_separated_directions

problem = build_benchmark("exp1", 4, 5, 3)
ref = dense_reference(problem)
idx = well_separated_directions(ref.s, 20)
print(f"{len(idx)} isolated directions among the leading 20")

for method in ("stage-p", "r-stage-p", "s-rank1"):
    cfg = SolverConfig(method=method, p_max=56, k_max=5, n_update=1, tau=1e-3,
                       epsilon=1e-15, tol_basis=1e-10, tol_coupled=1e-10, track_residual=False)
    F, _ = solve(problem, cfg)
    CV, CW = angle_matrices(ref, F)
    good = np.minimum(np.abs(np.diag(CV)), np.abs(np.diag(CW)))[idx] > 0.99
    missed = [int(i) for i in np.asarray(idx)[~good]]
    print(f"{method:10s} recovered {good.sum():2d}/{len(idx)}  missed {missed}")
