"""Low-rank solvers for multi-term matrix equations from stochastic Galerkin methods."""
from .tensor_core import KroneckerOperator, LowRankFactors
from .sgfem import GalerkinProblem, build_benchmark
from .aem import SolverConfig, ConvergenceTrace, SolverError, solve
from .diagnostics import ReferenceSolution, dense_reference, error_metrics

__all__ = [
    "KroneckerOperator",
    "LowRankFactors",
    "GalerkinProblem",
    "build_benchmark",
    "SolverConfig",
    "ConvergenceTrace",
    "SolverError",
    "solve",
    "ReferenceSolution",
    "dense_reference",
    "error_metrics",
]

__version__ = "0.1.0"
