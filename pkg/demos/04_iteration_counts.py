"""Outer iterations needed by the enhanced solvers at several tolerances.

Averages over the grid n_update in {5, 10, 20, 30} and k_max in {1, 2}.
The problem is smaller than a production run, so only the relative order of
the methods is meaningful.

Run:  python demos/04_iteration_counts.py   (a few minutes)
"""
from kronaem.cli import RunConfig, run_sweep, sweep_means

for benchmark, eps in (("exp1", "1e-8,1e-7,1e-6"), ("fast-decay", "1e-8,1e-7,1e-6")):
    cfg = RunConfig.from_mapping({"benchmark": benchmark, "grid_level": "5", "m": "8",
                                  "d_tot": "3", "sweep_epsilon": eps})
    print(benchmark)
    for method, epsilon, mean_p, mean_relres in sweep_means(run_sweep(cfg)):
        print(f"  {method:10s} eps={epsilon:.0e}  mean p={mean_p:6.1f}  relres={mean_relres:.1e}")
