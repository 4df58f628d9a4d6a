"""Command-line driver: ``kronaem assemble|solve|reference|diagnose|sweep``.

Configuration is a flat ``key=value`` file (see ``RunConfig``); ``--method``,
``--seed``, ``--out`` and repeated ``--set key=value`` override it.
Exit codes: 0 success, 1 configuration or input error, 2 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as kio
from .aem import SolverConfig, SolverError, solve
from .diagnostics import (
    DenseCapError,
    angle_matrices,
    dense_reference,
    error_metrics,
    svd_truncation_curve,
)
from .sgfem import BENCHMARKS, GalerkinProblem, build_benchmark

logger = logging.getLogger("kronaem")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

_PROBLEM_PARAMS = ("mu", "sigma", "c", "sigma_decay", "alpha_bar")
_SOLVER_FIELDS = {f.name: f for f in dataclasses.fields(SolverConfig)}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_list(text: str, conv):
    return tuple(conv(x) for x in text.replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs.

    Problem keys: ``benchmark``, ``grid_level``, ``m``, ``d_tot``,
    ``quad_order``, the coefficient parameters (``mu``, ``sigma``, ``c``,
    ``sigma_decay``, ``alpha_bar``) or ``problem_dir`` to load an assembled
    problem. Every ``SolverConfig`` field is accepted under its own name.
    Run keys: ``out``, ``record_timing``, ``dense_reference`` and the sweep
    grid ``sweep_methods``, ``sweep_n_update``, ``sweep_k_max``,
    ``sweep_epsilon``, ``sweep_workers``.
    """

    benchmark: str = "exp1"
    grid_level: int = 4
    m: int = 5
    d_tot: int = 3
    quad_order: int = 2
    problem_params: dict = field(default_factory=dict)
    problem_dir: Optional[str] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    out: str = "out"
    record_timing: bool = True
    dense_reference: bool = True
    sweep_methods: tuple = ("pgd", "pgd-gs", "r-stage-p")
    sweep_n_update: tuple = (5, 10, 20, 30)
    sweep_k_max: tuple = (1, 2)
    sweep_epsilon: tuple = (1e-10, 1e-9, 1e-8, 1e-7)
    sweep_workers: int = 1

    @classmethod
    def from_mapping(cls, entries: dict) -> "RunConfig":
        entries = dict(entries)
        kw, solver_kw, params = {}, {}, {}
        try:
            for key, raw in entries.items():
                if key in ("grid_level", "m", "d_tot", "quad_order", "sweep_workers"):
                    kw[key] = int(raw)
                elif key in ("benchmark", "out"):
                    kw[key] = raw
                elif key == "problem_dir":
                    kw[key] = raw or None
                elif key in ("record_timing", "dense_reference"):
                    kw[key] = _parse_bool(raw)
                elif key == "sweep_methods":
                    kw[key] = _parse_list(raw, str)
                elif key in ("sweep_n_update", "sweep_k_max"):
                    kw[key] = _parse_list(raw, int)
                elif key == "sweep_epsilon":
                    kw[key] = _parse_list(raw, float)
                elif key in _PROBLEM_PARAMS:
                    params[key] = float(raw)
                elif key in _SOLVER_FIELDS:
                    solver_kw[key] = _convert_solver_value(key, raw)
                else:
                    raise ConfigError(f"unknown configuration key {key!r}")
            solver = SolverConfig(**solver_kw)
            cfg = cls(problem_params=params, solver=solver, **kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.problem_dir is None and self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; choose from {BENCHMARKS}")
        if self.grid_level < 1 or self.m < 0 or self.d_tot < 0:
            raise ConfigError("grid_level must be >= 1 and m, d_tot >= 0")
        if self.sweep_workers < 1:
            raise ConfigError("sweep_workers must be >= 1")
        for meth in self.sweep_methods:
            if meth not in ("stage-p", "s-rank1", "pgd", "pgd-gs", "r-stage-p"):
                raise ConfigError(f"unknown sweep method {meth!r}")

    def manifest(self) -> dict:
        out = {
            "benchmark": self.benchmark,
            "grid_level": self.grid_level,
            "m": self.m,
            "d_tot": self.d_tot,
            "quad_order": self.quad_order,
        }
        if self.problem_dir:
            out["problem_dir"] = self.problem_dir
        out.update(self.problem_params)
        for name in _SOLVER_FIELDS:
            out[name] = getattr(self.solver, name)
        out["tol_coupled_effective"] = self.solver.coupled_tol
        return out


def _convert_solver_value(key, raw: str):
    if key in ("method", "pgd_side"):
        return raw
    if key == "svp_step":
        return raw if raw == "normalized" else float(raw)
    if key == "track_residual":
        return _parse_bool(raw)
    if key == "tol_coupled":
        return None if raw in ("", "none", "None") else float(raw)
    if key in ("p_max", "k_max", "n_update", "seed", "pcg_max_iters"):
        return int(raw)
    return float(raw)


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    entries = {}
    if path is not None:
        try:
            entries.update(kio.read_manifest(path))
        except kio.ProblemFileError as exc:
            raise ConfigError(str(exc)) from exc
    entries.update(overrides)
    return RunConfig.from_mapping(entries)


def build_problem(cfg: RunConfig) -> GalerkinProblem:
    if cfg.problem_dir:
        return kio.load_problem_from_files(cfg.problem_dir)
    return build_benchmark(cfg.benchmark, cfg.grid_level, cfg.m, cfg.d_tot, cfg.quad_order,
                           **cfg.problem_params)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _write_trace(out: Path, trace, cfg: RunConfig, name="trace.csv"):
    (out / name).write_text(trace.to_csv(include_timing=cfg.record_timing))


def cmd_assemble(cfg: RunConfig, out: Path) -> int:
    problem = build_problem(cfg)
    kio.save_problem(out, problem, extra={k: v for k, v in cfg.manifest().items()
                                           if k in _SOLVER_FIELDS or k == "tol_coupled_effective"})
    print(f"assembled {problem.benchmark}: n_x={problem.n_x} n_xi={problem.n_xi} m={problem.m} -> {out}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    problem = build_problem(cfg)
    t0 = time.perf_counter()
    try:
        F, trace = solve(problem, cfg.solver)
    except SolverError as exc:
        if exc.trace is not None:
            _write_trace(out, exc.trace, cfg, "trace_partial.csv")
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    seconds = time.perf_counter() - t0
    kio.write_factors(out, F)
    _write_trace(out, trace, cfg)
    relres = error_metrics(problem, None, F).relres
    man = problem.manifest()
    man.update(cfg.manifest())
    man.update(p_final=trace.p_final, stopped=trace.stopped, relres=repr(relres))
    if cfg.record_timing:
        man["seconds"] = f"{seconds:.3f}"
    kio.write_manifest(out / kio.MANIFEST, man)
    print(f"{cfg.solver.method}: p={trace.p_final} stopped={trace.stopped} relres={relres:.3e}")
    return EXIT_OK


def cmd_reference(cfg: RunConfig, out: Path) -> int:
    problem = build_problem(cfg)
    ref = dense_reference(problem)
    kio.write_dense_csv(out / "U.csv", ref.U)
    kio.write_dense_csv(out / "singular_values.csv", ref.s[:, None])
    kio.write_dense_csv(out / "Vstar.csv", ref.Vs)
    kio.write_dense_csv(out / "Wstar.csv", ref.Ws)
    print(f"reference: {ref.U.shape[0]}x{ref.U.shape[1]}, sigma_1={ref.s[0]:.6e}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, out: Path) -> int:
    """Re-run the configured solver and record errors against the reference at every ``p``."""
    problem = build_problem(cfg)
    ref = dense_reference(problem) if cfg.dense_reference else None
    rows = []

    def record(p, F):
        rows.append((p, error_metrics(problem, ref, F)))

    try:
        F, trace = solve(problem, cfg.solver, callback=record)
    except SolverError as exc:
        if exc.trace is not None:
            _write_trace(out, exc.trace, cfg, "trace_partial.csv")
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    full = {}
    if ref is not None:
        full = {p: (e, f) for p, e, f in svd_truncation_curve(problem, ref, trace.p_final)}
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("p", "energy", "frob", "relres", "full_energy", "full_frob"))
        for p, met in rows:
            fe, ff = full.get(p, (0.0, 0.0)) if ref is not None else (float("nan"),) * 2
            w.writerow((p, repr(met.energy), repr(met.frob), repr(met.relres), repr(fe), repr(ff)))
    if ref is not None:
        CV, CW = angle_matrices(ref, F)
        kio.write_dense_csv(out / "angles_V.csv", CV)
        kio.write_dense_csv(out / "angles_W.csv", CW)
    _write_trace(out, trace, cfg)
    print(f"diagnose {cfg.solver.method}: {len(rows)} iterations -> {out / 'errors.csv'}")
    return EXIT_OK


SWEEP_HEADER = ("method", "n_update", "k_max", "epsilon", "p_final", "relres", "seconds")


def _sweep_one(args):
    cfg, method, n_update, k_max, eps = args
    problem = build_problem(cfg)
    solver = dataclasses.replace(cfg.solver, method=method, n_update=n_update, k_max=k_max,
                                 epsilon=eps, tol_coupled=None, track_residual=False)
    t0 = time.perf_counter()
    F, trace = solve(problem, solver)
    seconds = time.perf_counter() - t0
    relres = error_metrics(problem, None, F).relres
    return (method, n_update, k_max, eps, trace.p_final, relres, seconds)


def run_sweep(cfg: RunConfig):
    """Rows of ``SWEEP_HEADER`` for the full (method, n_update, k_max, epsilon) grid."""
    grid = [(cfg, meth, nu, k, eps)
            for meth, eps, nu, k in itertools.product(cfg.sweep_methods, cfg.sweep_epsilon,
                                                      cfg.sweep_n_update, cfg.sweep_k_max)]
    if cfg.sweep_workers > 1:
        with ProcessPoolExecutor(cfg.sweep_workers) as pool:
            return list(pool.map(_sweep_one, grid))
    return [_sweep_one(g) for g in grid]


def sweep_means(rows):
    """Mean ``p_final`` and ``relres`` per (method, epsilon)."""
    groups = {}
    for meth, _, _, eps, p, relres, _ in rows:
        groups.setdefault((meth, eps), []).append((p, relres))
    return [(meth, eps, float(np.mean([p for p, _ in v])), float(np.mean([r for _, r in v])))
            for (meth, eps), v in groups.items()]


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    try:
        rows = run_sweep(cfg)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for meth, nu, k, eps, p, relres, sec in rows:
            w.writerow((meth, nu, k, repr(eps), p, repr(relres),
                        f"{sec:.3f}" if cfg.record_timing else ""))
    means = sweep_means(rows)
    with open(out / "mean_p.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "epsilon", "mean_p", "mean_relres"))
        for meth, eps, p, r in means:
            w.writerow((meth, repr(eps), f"{p:.3f}", repr(r)))
    for meth, eps, p, _ in means:
        print(f"{meth:10s} eps={eps:.0e} mean p={p:.1f}")
    return EXIT_OK


COMMANDS = {
    "assemble": cmd_assemble,
    "solve": cmd_solve,
    "reference": cmd_reference,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def _parser():
    ap = argparse.ArgumentParser(prog="kronaem", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value configuration file")
    ap.add_argument("--method", help="solver method (overrides the config)")
    ap.add_argument("--seed", type=int, help="random seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any configuration key; may be repeated")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"--set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("method", "seed", "out"):
        if getattr(args, key) is not None:
            overrides[key] = str(getattr(args, key))
    try:
        cfg = load_config(args.config, overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, kio.ProblemFileError, DenseCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
