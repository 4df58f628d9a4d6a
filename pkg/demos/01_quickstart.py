"""Assemble a small stochastic diffusion problem and solve it in low-rank form.

Run:  python demos/01_quickstart.py
"""
from kronaem import SolverConfig, build_benchmark, error_metrics, solve

# 31x31 interior grid, eight random variables, total degree three
problem = build_benchmark("exp1", grid_level=5, m=8, d_tot=3)
print(f"spatial dofs {problem.n_x}, stochastic dofs {problem.n_xi}, terms {problem.op.n_terms}")

F, trace = solve(problem, SolverConfig(method="r-stage-p", epsilon=1e-6))
met = error_metrics(problem, None, F)
print(f"rank {F.rank} after {trace.p_final} outer iterations, relative residual {met.relres:.2e}")
print(f"storage: {F.V.size + F.W.size} numbers instead of {problem.n_x * problem.n_xi}")
