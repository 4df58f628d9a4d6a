"""On-disk formats: Matrix Market operators, dense CSV matrices, key=value manifests.

An assembled problem directory holds ``manifest.txt``, ``K_0.mtx`` ...
``K_m.mtx``, ``G_0.mtx`` ... ``G_m.mtx`` and the right-hand-side factors
``f0.csv`` and ``g0.csv`` with ``B = f0 g0^T``.

Dense CSV files start with a ``rows,cols`` header line followed by one line
per row. Values are written with 17 significant digits so reading gives back
the same doubles.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .sgfem import GalerkinProblem
from .tensor_core import KroneckerOperator, LowRankFactors

MANIFEST = "manifest.txt"


class ProblemFileError(ValueError):
    """A problem directory is incomplete or inconsistent."""


# -- dense matrices ----------------------------------------------------------


def write_dense_csv(path, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(M.shape)
        for row in M:
            w.writerow([f"{x:.17g}" for x in row])


def read_dense_csv(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ProblemFileError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ProblemFileError(f"{path} is empty")
    try:
        n, k = (int(x) for x in rows[0])
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ProblemFileError(f"{path} is not a valid dense CSV: {exc}") from exc
    data = data.reshape(n, k) if data.size == n * k else data
    if data.shape != (n, k):
        raise ProblemFileError(f"{path}: header says {n}x{k}, found shape {data.shape}")
    return data


def write_factors(directory, F: LowRankFactors, prefix: str = "") -> None:
    directory = Path(directory)
    write_dense_csv(directory / f"{prefix}V.csv", F.V)
    write_dense_csv(directory / f"{prefix}W.csv", F.W)


def read_factors(directory, prefix: str = "") -> LowRankFactors:
    directory = Path(directory)
    return LowRankFactors(read_dense_csv(directory / f"{prefix}V.csv"),
                          read_dense_csv(directory / f"{prefix}W.csv"))


# -- sparse matrices ---------------------------------------------------------


def write_sparse(path, M) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(M), precision=17, symmetry="general")


def read_sparse(path) -> sp.csr_matrix:
    try:
        return sp.csr_matrix(scipy.io.mmread(str(path)))
    except (OSError, ValueError) as exc:
        raise ProblemFileError(f"cannot read Matrix Market file {path}: {exc}") from exc


# -- manifests ---------------------------------------------------------------


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={'' if v is None else v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ProblemFileError(f"cannot read {path}: {exc}") from exc
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ProblemFileError(f"{path}:{num}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- problems ----------------------------------------------------------------


def save_problem(directory, problem: GalerkinProblem, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (k, g) in enumerate(zip(problem.op.K, problem.op.G)):
        write_sparse(directory / f"K_{i}.mtx", k)
        write_sparse(directory / f"G_{i}.mtx", g)
    write_dense_csv(directory / "f0.csv", problem.rhs.V)
    write_dense_csv(directory / "g0.csv", problem.rhs.W)
    entries = problem.manifest()
    entries.update(extra or {})
    write_manifest(directory / MANIFEST, entries)
    return directory


def _count_terms(directory: Path, letter: str) -> int:
    n = 0
    while (directory / f"{letter}_{n}.mtx").exists():
        n += 1
    return n


def load_problem_from_files(directory) -> GalerkinProblem:
    """Rebuild a problem written by :func:`save_problem` or by hand.

    Only ``m`` is required in the manifest; ``n_x``/``n_xi`` are checked
    when present.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ProblemFileError(f"{directory} is not a directory")
    man = read_manifest(directory / MANIFEST)
    if "m" not in man:
        raise ProblemFileError(f"{directory / MANIFEST} has no 'm' entry")
    try:
        m = int(man["m"])
    except ValueError as exc:
        raise ProblemFileError(f"manifest m={man['m']!r} is not an integer") from exc
    nk, ng = _count_terms(directory, "K"), _count_terms(directory, "G")
    if nk != m + 1 or ng != m + 1:
        raise ProblemFileError(
            f"manifest says m={m} ({m + 1} terms) but found {nk} K files and {ng} G files"
        )
    K = tuple(read_sparse(directory / f"K_{i}.mtx") for i in range(m + 1))
    G = tuple(read_sparse(directory / f"G_{i}.mtx") for i in range(m + 1))
    try:
        op = KroneckerOperator(K, G)
    except ValueError as exc:
        raise ProblemFileError(f"inconsistent operator files: {exc}") from exc
    rhs = LowRankFactors(read_dense_csv(directory / "f0.csv"), read_dense_csv(directory / "g0.csv"))
    for key, actual in (("n_x", op.n1), ("n_xi", op.n2)):
        if man.get(key) and int(man[key]) != actual:
            raise ProblemFileError(f"manifest {key}={man[key]} but operator size is {actual}")
    grid = man.get("grid_level") or None
    params = {k: v for k, v in man.items()
              if k not in ("benchmark", "grid_level", "m", "d_tot", "n_x", "n_xi", "density")}
    try:
        return GalerkinProblem(op, rhs, op.n1, op.n2,
                               grid_level=None if grid is None else int(grid),
                               benchmark=man.get("benchmark", "custom"), params=params)
    except ValueError as exc:
        raise ProblemFileError(str(exc)) from exc
