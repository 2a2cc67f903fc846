"""Experiment drivers: phase transition, timing, covariance sketching, theory checks.

Every trial is a pure function of a seed derived from ``(master_seed, tags)``
with :class:`numpy.random.SeedSequence`, so results do not depend on worker
count or scheduling.  Records are sorted before writing, and all columns
other than ``time_ms`` (and ``median_time_ms`` in summaries) are
reproducible byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .block_model import GroupModel, l21_norm, random_block_sparse
from .expander import (BipartiteExpander, TensorExpander, check_expansion, construct_random,
                       experimental_degree)
from .solver import (Constraint, RecoveryProblem, SolverConfig, expander_operator, make_gaussian,
                     solve, tensor_operator)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUCCESS_THRESHOLD = 1e-5
CSV_COLUMNS = ("schema", "experiment", "trial", "seed", "n", "p", "M", "g", "k", "method",
               "matrix", "success", "err_l2", "err_l21", "residual_l1", "time_ms", "iters",
               "converged")
SUMMARY_COLUMNS = ("schema", "experiment", "n", "p", "M", "g", "k", "method", "matrix", "trials",
                   "successes", "success_rate", "mean_err_l2", "median_err_l2", "median_iters",
                   "median_time_ms")
TIMING_COLUMNS = ("time_ms", "median_time_ms")
DENSE_BUDGET = 2 * 10**8  # float64 entries, about 1.6 GB

PHASE_SOLVER = SolverConfig(rel_tol=1e-10, max_iter=20000)
TIMING_SOLVER = SolverConfig(rel_tol=1e-6, max_iter=20000)
THEORY_SOLVER = SolverConfig(rel_tol=1e-10, max_iter=50000)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ResourceError(MemoryError):
    """A requested dense operator exceeds the memory budget."""


def derive_seed(master: int, *tags: int) -> int:
    """64-bit seed determined by the master seed and integer tags."""
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF, *[int(t) for t in tags]]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def default_grid(p: int) -> list:
    """``ceil(f p)`` for ``f = 0.10, 0.15, ..., 0.50``."""
    return [-(-p * i // 20) for i in range(2, 11)]


def parse_grid(text: str, p: int) -> list:
    """Parse ``start:stop:step`` (inclusive) or a comma list of counts or fractions of ``p``."""
    text = text.strip()
    if ":" in text:
        parts = [int(s) for s in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ConfigError(f"grid {text!r} must be start:stop:step with step > 0")
        start, stop, step = parts
        return list(range(start, stop + 1, step))
    out = []
    for tok in text.split(","):
        val = float(tok)
        out.append(math.ceil(val * p) if 0 < val < 1 else int(val))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the phase and timing experiments.

    ``d=None`` selects the experimental degree rule ``ceil(22 ln(M) / g)``.
    An empty ``n_grid`` selects :func:`default_grid` (phase) or
    ``ceil(0.4 p)`` (timing).
    """

    experiment: str = "phase"
    p: int = 1000
    M: int = 100
    k: int = 8
    n_grid: tuple = ()
    matrix_kind: str = "expander"
    objective: str = "both"
    d: Optional[int] = None
    signal: str = "gaussian"
    monte_carlo: int = 10
    master_seed: int = 0
    solver: SolverConfig = PHASE_SOLVER
    wall_clock_cap: Optional[float] = None
    dense_budget: int = DENSE_BUDGET

    def __post_init__(self):
        if self.experiment not in ("phase", "timing", "cov-sketch", "verify-theory"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.M < 1 or self.p < 1 or self.p % self.M:
            raise ConfigError(f"p = {self.p} must be a positive multiple of M = {self.M}")
        if not 0 <= self.k <= self.M:
            raise ConfigError(f"k = {self.k} outside [0, M]")
        if self.monte_carlo < 1:
            raise ConfigError("monte_carlo must be >= 1")
        if self.matrix_kind not in ("expander", "gaussian", "both"):
            raise ConfigError(f"unknown matrix kind {self.matrix_kind!r}")
        if self.objective not in ("l1", "l21", "both"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.signal not in ("gaussian", "sign", "both"):
            raise ConfigError(f"unknown signal {self.signal!r}")
        grid = tuple(int(n) for n in self.n_grid)
        if any(n < 1 or n > self.p for n in grid):
            raise ConfigError(f"grid entries must lie in [1, p = {self.p}]")
        object.__setattr__(self, "n_grid", grid)
        if self.d is not None and self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.wall_clock_cap is not None and self.wall_clock_cap <= 0:
            raise ConfigError("wall_clock_cap must be positive")

    @property
    def g(self) -> int:
        return self.p // self.M

    @property
    def degree(self) -> int:
        return self.d if self.d is not None else experimental_degree(self.M, self.g)

    def grid(self) -> list:
        if self.n_grid:
            return list(self.n_grid)
        if self.experiment == "timing":
            return [math.ceil(0.4 * self.p)]
        return default_grid(self.p)

    def methods(self) -> list:
        return ["l1", "l21"] if self.objective == "both" else [self.objective]

    def matrices(self) -> list:
        return ["expander", "gaussian"] if self.matrix_kind == "both" else [self.matrix_kind]

    def signals(self) -> list:
        return ["gaussian", "sign"] if self.signal == "both" else [self.signal]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["n_grid"] = self.grid()
        out["grid_source"] = "user" if self.n_grid else "default"
        out["d"] = self.degree
        out["d_rule"] = "explicit" if self.d is not None else "experimental"
        return out


@dataclass(frozen=True)
class TrialRecord:
    experiment: str
    trial: int
    seed: int
    n: int
    p: int
    M: int
    g: int
    k: int
    method: str
    matrix: str
    success: bool
    err_l2: float
    err_l21: float
    residual_l1: float
    time_ms: float
    iters: int
    converged: bool

    def key(self) -> tuple:
        return (self.experiment, self.p, self.n, self.method, self.matrix, self.trial)

    def to_row(self) -> dict:
        row = {"schema": SCHEMA_VERSION}
        row.update(dataclasses.asdict(self))
        for name in ("success", "converged"):
            row[name] = int(row[name])
        for name in ("err_l2", "err_l21", "residual_l1", "time_ms"):
            row[name] = repr(float(row[name]))
        return row

    @classmethod
    def from_row(cls, row: dict) -> "TrialRecord":
        kw = {}
        for f in dataclasses.fields(cls):
            raw = row[f.name]
            if f.type in ("bool",):
                kw[f.name] = bool(int(raw))
            elif f.type in ("int",):
                kw[f.name] = int(raw)
            elif f.type in ("float",):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


@dataclass
class ExperimentResult:
    records: list
    summary: list
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def write(self, out_dir, fmt: str = "csv") -> list:
        """Write ``records.csv`` (or ``.json``), ``summary.csv`` and ``metadata.json``.

        Wall-clock derived values go to ``timing.json`` so the other files
        stay reproducible.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        if fmt == "json":
            path = out / "records.json"
            path.write_text(json.dumps([r.to_row() for r in self.records], indent=1) + "\n")
        else:
            path = out / "records.csv"
            path.write_text(records_csv(self.records))
        paths.append(path)
        path = out / "summary.csv"
        path.write_text(rows_csv(self.summary, SUMMARY_COLUMNS))
        paths.append(path)
        path = out / "metadata.json"
        path.write_text(json.dumps(self.metadata, indent=1, sort_keys=True, default=str) + "\n")
        paths.append(path)
        if self.timing:
            path = out / "timing.json"
            path.write_text(json.dumps(self.timing, indent=1, sort_keys=True) + "\n")
            paths.append(path)
        return paths


def rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def records_csv(records) -> str:
    return rows_csv([r.to_row() for r in sorted(records, key=TrialRecord.key)], CSV_COLUMNS)


def read_records_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if int(row["schema"]) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema {row['schema']}")
    return [TrialRecord.from_row(r) for r in rows]


def strip_timing(text: str) -> str:
    """CSV text with timing columns removed, for reproducibility comparisons."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return text
    keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_COLUMNS]
    return "\n".join(",".join(r[i] for i in keep) for r in rows) + "\n"


def validate_records(records) -> list:
    """Rows whose ``success`` flag disagrees with the threshold, or with negative time."""
    bad = []
    for r in records:
        if r.success != (r.err_l2 <= SUCCESS_THRESHOLD) or r.time_ms < 0:
            bad.append(r)
    return bad


def summarize(records) -> list:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.experiment, r.p, r.n, r.method, r.matrix), []).append(r)
    rows = []
    for key in sorted(groups):
        rs = groups[key]
        first = rs[0]
        errs = [r.err_l2 for r in rs]
        successes = sum(r.success for r in rs)
        rows.append({
            "schema": SCHEMA_VERSION,
            "experiment": first.experiment,
            "n": first.n,
            "p": first.p,
            "M": first.M,
            "g": first.g,
            "k": first.k,
            "method": first.method,
            "matrix": first.matrix,
            "trials": len(rs),
            "successes": successes,
            "success_rate": repr(successes / len(rs)),
            "mean_err_l2": repr(float(np.mean(errs))),
            "median_err_l2": repr(float(statistics.median(errs))),
            "median_iters": repr(float(statistics.median(r.iters for r in rs))),
            "median_time_ms": repr(float(statistics.median(r.time_ms for r in rs))),
        })
    return rows


def _pool_map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _solver_for(config: ExperimentConfig) -> SolverConfig:
    if config.wall_clock_cap is None:
        return config.solver
    return dataclasses.replace(config.solver, time_limit=config.wall_clock_cap)


def _check_dense_budget(n: int, p: int, budget: int) -> None:
    if n * p > budget:
        raise ResourceError(
            f"dense Gaussian {n}x{p} needs {n * p * 8 / 2**30:.2f} GiB, "
            f"above the budget of {budget} entries; raise the budget or drop the Gaussian run")


def _run_instance(task) -> list:
    """All method/matrix combinations on one planted instance."""
    config, experiment, signal, n, trial, seed = task
    model = GroupModel.consecutive(config.p, config.g)
    ss = np.random.SeedSequence(seed)
    sig_ss, exp_ss, gauss_ss = ss.spawn(3)
    beta = random_block_sparse(model, config.k, np.random.default_rng(sig_ss), kind=signal)
    solver_cfg = _solver_for(config)
    records = []
    for matrix in config.matrices():
        if matrix == "expander":
            X = construct_random(config.p, n, config.degree,
                                 int(exp_ss.generate_state(1, np.uint64)[0]))
            op = expander_operator(X)
        else:
            _check_dense_budget(n, config.p, config.dense_budget)
            op = make_gaussian((n, config.p), int(gauss_ss.generate_state(1, np.uint64)[0]))
        y = op.apply(beta)
        for method in config.methods():
            problem = RecoveryProblem(op, y, model if method == "l21" else None)
            rep = solve(problem, solver_cfg)
            diff = rep.beta_hat - beta
            err = float(np.linalg.norm(diff))
            records.append(TrialRecord(
                experiment=experiment, trial=trial, seed=seed, n=n, p=config.p, M=config.M,
                g=config.g, k=config.k, method=method, matrix=matrix,
                success=bool(err <= SUCCESS_THRESHOLD and not rep.timed_out),
                err_l2=err, err_l21=l21_norm(model, diff), residual_l1=rep.residual_l1,
                time_ms=rep.wall_time * 1000.0, iters=rep.iterations, converged=rep.converged))
        del op
    return records


def _experiment_tasks(config: ExperimentConfig, label: str) -> list:
    tasks = []
    signals = config.signals()
    for s_idx, signal in enumerate(["gaussian", "sign"]):
        if signal not in signals:
            continue
        experiment = label if len(signals) == 1 else f"{label}-{signal}"
        for n in config.grid():
            for trial in range(config.monte_carlo):
                seed = derive_seed(config.master_seed, s_idx, config.p, n, trial)
                tasks.append((config, experiment, signal, n, trial, seed))
    return tasks


def run_phase(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Success rate of each method/matrix over the measurement grid.

    Each ``(signal, n, trial)`` plants a unit-norm ``k``-block vector and
    builds one matrix per kind; every method solves that same instance.
    Timed-out solves count as failures.
    """
    tasks = _experiment_tasks(config, "phase")
    records = [r for batch in _pool_map(_run_instance, tasks, workers) for r in batch]
    records.sort(key=TrialRecord.key)
    meta = {"experiment": "phase", "config": config.to_dict(), "schema": SCHEMA_VERSION,
            "success_threshold": SUCCESS_THRESHOLD}
    return ExperimentResult(records, summarize(records), meta)


def run_timing(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Median solve time of expander versus dense Gaussian matrices.

    The dense matrix is refused up front when ``n * p`` exceeds
    ``config.dense_budget``.  ``timing["speedup"]`` holds the
    Gaussian/expander ratio of median times per ``n`` and method.
    """
    if "gaussian" in config.matrices():
        for n in config.grid():
            _check_dense_budget(n, config.p, config.dense_budget)
    tasks = _experiment_tasks(config, "timing")
    records = [r for batch in _pool_map(_run_instance, tasks, workers) for r in batch]
    records.sort(key=TrialRecord.key)
    summary = summarize(records)
    speedups = {}
    for n in config.grid():
        for method in config.methods():
            med = {row["matrix"]: float(row["median_time_ms"]) for row in summary
                   if row["n"] == n and row["method"] == method}
            if "expander" in med and "gaussian" in med and med["expander"] > 0:
                speedups[f"{n}/{method}"] = med["gaussian"] / med["expander"]
    meta = {"experiment": "timing", "config": config.to_dict(), "schema": SCHEMA_VERSION}
    return ExperimentResult(records, summary, meta, {"speedup": speedups})


def matvec_cost_ratio(p: int, n: int, d: int, seed: int = 0, repeats: int = 20) -> float:
    """Median dense-Gaussian time over median expander time for one ``X beta`` product."""
    X = expander_operator(construct_random(p, n, d, derive_seed(seed, 0)))
    _check_dense_budget(n, p, DENSE_BUDGET)
    G = make_gaussian((n, p), derive_seed(seed, 1))
    beta = np.random.default_rng(seed).standard_normal(p)

    def median_time(op):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            op.apply(beta)
            times.append(time.perf_counter() - t0)
        return statistics.median(times)

    return median_time(G) / max(median_time(X), 1e-9)


# --- synthetic frames -----------------------------------------------------

def synthetic_frame(side: int, blobs: int, rng: np.random.Generator) -> np.ndarray:
    """Random rectangles on a ``side x side`` grid, values in ``[0, 1]``.

    Returned in column-major order, so consecutive groups are runs of
    pixels down a column.
    """
    img = np.zeros((side, side))
    lo, hi = max(1, side // 16), max(2, side // 4)
    for _ in range(blobs):
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, side - h + 1), rng.integers(0, side - w + 1)
        img[r:r + h, c:c + w] = np.maximum(img[r:r + h, c:c + w], rng.uniform(0.3, 1.0))
    return img.ravel(order="F")


def psnr(reference, estimate) -> float:
    """Peak signal-to-noise ratio in dB for signals with peak value 1."""
    mse = float(np.mean((np.asarray(reference) - np.asarray(estimate)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class ImageConfig:
    """Compressed recovery of synthetic frames with consecutive column-pixel groups."""

    side: int = 128
    g: int = 4
    fraction: float = 0.3
    blobs: int = 3
    frames: int = 1
    matrix_kind: str = "both"
    objective: str = "both"
    d: Optional[int] = None
    seed: int = 0
    wall_clock_cap: Optional[float] = 100.0
    solver: SolverConfig = SolverConfig(rel_tol=1e-6, max_iter=20000)
    dense_budget: int = DENSE_BUDGET

    def __post_init__(self):
        if self.side < 2 or (self.side * self.side) % self.g:
            raise ConfigError("g must divide side**2")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if self.matrix_kind not in ("expander", "gaussian", "both"):
            raise ConfigError(f"unknown matrix kind {self.matrix_kind!r}")
        if self.objective not in ("l1", "l21", "both"):
            raise ConfigError(f"unknown objective {self.objective!r}")


def run_image(config: ImageConfig) -> list:
    """One row per frame, matrix and method with PSNR, error and wall time."""
    p = config.side * config.side
    n = math.ceil(config.fraction * p)
    model = GroupModel.consecutive(p, config.g)
    d = config.d if config.d is not None else experimental_degree(model.M, config.g)
    matrices = ["expander", "gaussian"] if config.matrix_kind == "both" else [config.matrix_kind]
    methods = ["l1", "l21"] if config.objective == "both" else [config.objective]
    solver_cfg = (config.solver if config.wall_clock_cap is None
                  else dataclasses.replace(config.solver, time_limit=config.wall_clock_cap))
    rows = []
    for frame in range(config.frames):
        rng = np.random.default_rng(derive_seed(config.seed, frame))
        beta = synthetic_frame(config.side, config.blobs, rng)
        for m_idx, matrix in enumerate(matrices):
            mseed = derive_seed(config.seed, frame, m_idx + 1)
            if matrix == "expander":
                op = expander_operator(construct_random(p, n, d, mseed))
            else:
                _check_dense_budget(n, p, config.dense_budget)
                op = make_gaussian((n, p), mseed)
            y = op.apply(beta)
            for method in methods:
                rep = solve(RecoveryProblem(op, y, model if method == "l21" else None), solver_cfg)
                rows.append({"frame": frame, "matrix": matrix, "method": method, "n": n, "p": p,
                             "g": config.g, "d": d, "psnr": psnr(beta, rep.beta_hat),
                             "err_l2": float(np.linalg.norm(rep.beta_hat - beta)),
                             "time_ms": rep.wall_time * 1000.0, "iters": rep.iterations,
                             "timed_out": rep.timed_out})
    return rows


# --- covariance sketching -------------------------------------------------

@dataclass(frozen=True)
class CovSketchConfig:
    """Sketched covariance recovery setup.

    ``true_support`` lists planted columns of the covariance; when ``None``,
    ``k`` columns are drawn at random.  Groups on ``vec(Sigma)`` are runs of
    ``cov_group_g`` consecutive entries of the column-major vectorization
    (``cov_group_g = sqrt_p`` means one group per column).
    """

    sqrt_p: int = 32
    sqrt_n: int = 16
    d: int = 4
    q: int = 5000
    cov_group_g: Optional[int] = None
    true_support: Optional[tuple] = None
    k: int = 3
    strength: float = 2.0
    seed: int = 0
    detect_fraction: float = 0.5
    solver: SolverConfig = SolverConfig(rel_tol=1e-8, max_iter=20000)
    sketch: Optional[BipartiteExpander] = None

    def __post_init__(self):
        if self.sqrt_n > self.sqrt_p or self.sqrt_n < 1:
            raise ConfigError("need 1 <= sqrt_n <= sqrt_p")
        if self.q < 1:
            raise ConfigError("q must be >= 1")
        g = self.group_size
        if g < 1 or self.sqrt_p % g:
            raise ConfigError(f"cov_group_g = {g} must divide sqrt_p = {self.sqrt_p}")
        if self.true_support is not None:
            sup = tuple(sorted(int(j) for j in self.true_support))
            if any(j < 0 or j >= self.sqrt_p for j in sup):
                raise ConfigError("planted columns out of range")
            object.__setattr__(self, "true_support", sup)
        elif not 0 <= self.k <= self.sqrt_p:
            raise ConfigError("k out of range")
        if self.sketch is not None and self.sketch.shape != (self.sqrt_n, self.sqrt_p):
            raise ConfigError("sketch shape must be (sqrt_n, sqrt_p)")

    @property
    def group_size(self) -> int:
        return self.sqrt_p if self.cov_group_g is None else int(self.cov_group_g)


@dataclass
class CovSketchReport:
    planted_columns: list
    true_groups: list
    detected_groups: list
    precision: float
    recall: float
    err_l2: float
    rel_err: float
    iterations: int
    converged: bool
    min_eigenvalue: float
    diagonal_boost: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def planted_covariance(sqrt_p: int, columns, strength: float, rng: np.random.Generator,
                       min_eig: float = 0.1) -> tuple:
    """Identity plus symmetric couplings attached to the planted columns.

    Column ``j`` receives a random off-diagonal vector of Euclidean norm
    ``strength`` and a diagonal bump of ``strength**2``.  If the smallest
    eigenvalue falls below ``min_eig`` the whole diagonal is raised; the
    boost is returned and logged.
    """
    P = sqrt_p
    S = np.eye(P)
    cols = list(columns)
    for j in cols:
        a = rng.standard_normal(P)
        a[cols] = 0.0
        nrm = np.linalg.norm(a)
        if nrm > 0:
            a *= strength / nrm
        S[:, j] += a
        S[j, :] += a
        S[j, j] += strength**2
    lam = float(np.linalg.eigvalsh(S)[0])
    boost = 0.0
    if lam < min_eig:
        boost = min_eig - lam
        S += boost * np.eye(P)
        log.info("covariance regenerated with diagonal boost %.3g", boost)
        lam = float(np.linalg.eigvalsh(S)[0])
    return S, lam, boost


def identity_sketch(size: int) -> BipartiteExpander:
    return BipartiteExpander(size, size, 1, np.arange(size, dtype=np.uint32)[:, None])


def run_cov_sketch(config: CovSketchConfig) -> CovSketchReport:
    """Recover ``vec(Sigma_z)`` from ``Sigma_w = X Sigma_z X^T`` with group BP.

    The target is the empirical covariance of the unsketched samples, so an
    identity sketch recovers it exactly.  Detected groups are those whose
    recovered norm reaches ``detect_fraction`` of the largest group norm.
    """
    P, g = config.sqrt_p, config.group_size
    rng = np.random.default_rng(derive_seed(config.seed, 0))
    if config.true_support is not None:
        cols = list(config.true_support)
    else:
        cols = sorted(rng.choice(P, size=config.k, replace=False).tolist())
    Sigma, lam, boost = planted_covariance(P, cols, config.strength, rng)
    Z = rng.multivariate_normal(np.zeros(P), Sigma, size=config.q, method="cholesky")
    Sz = Z.T @ Z / config.q
    Xh = config.sketch if config.sketch is not None else construct_random(
        P, config.sqrt_n, config.d, derive_seed(config.seed, 1))
    W = Xh.csc @ Z.T  # (sqrt_n, q) sketched samples
    Sw = W @ W.T / config.q
    T = TensorExpander(Xh)
    op = tensor_operator(T)
    model = GroupModel.consecutive(P * P, g)
    target = Sz.ravel(order="F")
    rep = solve(RecoveryProblem(op, Sw.ravel(order="F"), model), config.solver)

    per_col = P // g
    true_groups = sorted(j * per_col + r for j in cols for r in range(per_col))
    norms = np.linalg.norm(rep.beta_hat[model.groups], axis=1)
    top = float(norms.max()) if norms.size else 0.0
    detected = sorted(np.flatnonzero(norms >= config.detect_fraction * top).tolist()) if top else []
    hit = len(set(detected) & set(true_groups))
    precision = hit / len(detected) if detected else 1.0
    recall = hit / len(true_groups) if true_groups else 1.0
    err = float(np.linalg.norm(rep.beta_hat - target))
    return CovSketchReport(cols, true_groups, detected, precision, recall, err,
                           err / float(np.linalg.norm(target)), rep.iterations, rep.converged,
                           lam, boost)


# --- theory verification --------------------------------------------------

@dataclass(frozen=True)
class TheoryConfig:
    """End-to-end checks of the recovery bound, its noisy form and the kernel inequality.

    Theorem instances use operators whose expansion over unions of up to
    ``2k`` groups is certified exhaustively and lies in the feasible range;
    draws outside it are rejected (at most ``max_draws`` per instance).  With
    ``matrix`` set, that operator is used for every instance and
    ``epsilon`` is taken as asserted.
    """

    p: int = 60
    M: int = 20
    k_values: tuple = (1, 2, 3)
    instances: int = 100
    d: int = 3
    n: int = 4000
    noisy: bool = True
    noise_level: float = 1e-3
    tail_level: float = 1e-2
    kernel_p: int = 40
    kernel_n: int = 20
    kernel_d: int = 4
    kernel_M: int = 10
    kernel_k: int = 2
    kernel_samples: int = 1000
    probability_M: int = 5
    probability_g: int = 2
    probability_k: int = 2
    probability_n: int = 800
    probability_epsilon: float = 0.15
    probability_d_grid: tuple = (1, 2, 4, 8)
    probability_trials: int = 200
    master_seed: int = 0
    solver: SolverConfig = THEORY_SOLVER
    atol_factor: float = 1e-6
    max_draws: int = 200
    matrix: Optional[BipartiteExpander] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.p % self.M:
            raise ConfigError("p must be a multiple of M")
        if self.instances < 0:
            raise ConfigError("instances must be >= 0")
        if self.matrix is not None:
            if self.epsilon is None:
                raise ConfigError("an explicit matrix needs an asserted epsilon")
            if self.matrix.n_cols != self.p:
                raise ConfigError(f"matrix has {self.matrix.n_cols} columns, expected p = {self.p}")

    @property
    def g(self) -> int:
        return self.p // self.M


def _worst_expansion(X: BipartiteExpander, model: GroupModel, max_groups: int,
                     stop_above: float) -> float:
    """Certified epsilon over unions of up to ``max_groups`` groups, with early exit."""
    worst = 0.0
    for t in range(1, min(max_groups, model.M) + 1):
        worst = max(worst, check_expansion(X, model, t, "exhaustive").epsilon)
        if worst >= stop_above:
            break
    return worst


def _draw_certified(config: TheoryConfig, model: GroupModel, k: int, seed: int):
    bound = float(analysis.feasibility_region(model.g)[0])
    for draw in range(config.max_draws):
        X = construct_random(model.p, config.n, config.d, derive_seed(seed, draw))
        eps = _worst_expansion(X, model, 2 * k, bound)
        if eps < bound:
            return X, eps, draw + 1
    raise ConfigError(f"no feasible expander in {config.max_draws} draws at n={config.n}, "
                      f"d={config.d}; increase n or d")


def _supports(M: int, k: int, instances: int, rng) -> list:
    from itertools import combinations
    if math.comb(M, k) <= instances:
        return [tuple(c) for c in combinations(range(M), k)]
    return [tuple(sorted(rng.choice(M, size=k, replace=False).tolist())) for _ in range(instances)]


def _plant(model: GroupModel, support, rng, tail_level: float, compressible: bool):
    beta = np.zeros(model.p)
    idx = model.groups[list(support)].ravel()
    beta[idx] = rng.standard_normal(idx.size)
    beta /= np.linalg.norm(beta)
    if compressible:
        beta += tail_level * rng.standard_normal(model.p) / math.sqrt(model.p)
    return beta


def _theorem_case(task) -> dict:
    config, k, i, support, noisy = task
    model = GroupModel.consecutive(config.p, config.g)
    seed = derive_seed(config.master_seed, 1000 + k, i, int(noisy))
    rng = np.random.default_rng(seed)
    if config.matrix is not None:
        X, eps, draws, certified = config.matrix, float(config.epsilon), 0, False
    else:
        X, eps, draws = _draw_certified(config, model, k, seed)
        certified = True
    beta = _plant(model, support, rng, config.tail_level, compressible=(i % 2 == 1))
    op = expander_operator(X)
    y = op.apply(beta)
    if noisy:
        xi = config.noise_level * rng.standard_normal(y.size)
        y = y + xi
        constraint = Constraint.l1_ball(float(np.abs(xi).sum()))
    else:
        constraint = Constraint.equality()
    rep = solve(RecoveryProblem(op, y, model, constraint), config.solver)
    gamma = float(np.abs(op.apply(beta - rep.beta_hat)).sum())
    atol = config.atol_factor * max(1.0, l21_norm(model, beta))
    cert = analysis.verify_theorem1(model, k, eps, beta, rep.beta_hat, gamma,
                                    certified=certified, atol=atol)
    return {"k": k, "instance": i, "seed": seed, "noisy": noisy, "support": list(support),
            "draws": draws, "converged": rep.converged, "iterations": rep.iterations,
            "certificate": cert.to_dict(), "violation": not cert.satisfied,
            "replay": None if cert.satisfied else {
                "matrix": X.to_dict(), "beta_star": beta.tolist(),
                "beta_hat": rep.beta_hat.tolist(), "y": y.tolist(),
                "constraint": dataclasses.asdict(constraint)}}


def run_verify_theory(config: TheoryConfig = TheoryConfig(), workers: int = 1) -> dict:
    """Bundle of bound certificates, kernel and expansion-probability checks.

    Returns a JSON-ready dict.  ``summary.violations`` counts failed bound
    checks; an explicit matrix also feeds the kernel check.
    """
    warn = []
    model = GroupModel.consecutive(config.p, config.g)
    rng = np.random.default_rng(derive_seed(config.master_seed, 7))
    tasks = []
    modes = [False, True] if config.noisy else [False]
    for k in config.k_values:
        if not 1 <= k <= config.M:
            raise ConfigError(f"k = {k} outside [1, M]")
        supports = _supports(config.M, k, config.instances, rng) if config.instances else []
        for noisy in modes:
            tasks.extend((config, k, i, s, noisy) for i, s in enumerate(supports))
    if not tasks:
        warn.append("no theorem instances requested; bound checks pass vacuously")
        warnings.warn(warn[-1])
    cases = _pool_map(_theorem_case, tasks, workers)

    if config.matrix is not None:
        kmodel, kX, keps = model, config.matrix, float(config.epsilon)
        kk = max(config.k_values)
    else:
        kmodel = GroupModel.consecutive(config.kernel_p, config.kernel_p // config.kernel_M)
        kX = construct_random(config.kernel_p, config.kernel_n, config.kernel_d,
                              derive_seed(config.master_seed, 11))
        kk = config.kernel_k
        keps = _worst_expansion(kX, kmodel, 2 * kk, math.inf)
    kernel = analysis.verify_kernel_lemma(kX, kmodel, kk, keps, config.kernel_samples,
                                          derive_seed(config.master_seed, 12))

    probability = []
    for d in config.probability_d_grid:
        if d > config.probability_n:
            continue
        est = analysis.estimate_expansion_probability(
            config.probability_M, config.probability_k, config.probability_g, d,
            config.probability_n, config.probability_epsilon, config.probability_trials,
            derive_seed(config.master_seed, 13))
        probability.append(est.to_dict())

    theorem_viol = sum(c["violation"] for c in cases if not c["noisy"])
    corollary_viol = sum(c["violation"] for c in cases if c["noisy"])
    violations = theorem_viol + corollary_viol + kernel.violations
    return {
        "config": {k: v for k, v in dataclasses.asdict(config).items()
                   if k not in ("matrix", "solver")},
        "epsilon_source": "asserted" if config.matrix is not None else "certified",
        "cases": cases,
        "kernel_lemma": kernel.to_dict(),
        "expansion_probability": probability,
        "warnings": warn,
        "summary": {
            "theorem_instances": sum(not c["noisy"] for c in cases),
            "corollary_instances": sum(c["noisy"] for c in cases),
            "theorem_violations": theorem_viol,
            "corollary_violations": corollary_viol,
            "kernel_violations": kernel.violations,
            "violations": violations,
            "passed": violations == 0,
        },
    }


def replay_cases(bundle: dict) -> list:
    """Violating cases with everything needed to re-run them."""
    return [c for c in bundle["cases"] if c["violation"]]


__all__: Sequence[str] = [
    "CSV_COLUMNS", "ConfigError", "CovSketchConfig", "CovSketchReport", "ExperimentConfig",
    "ExperimentResult", "ResourceError", "SUCCESS_THRESHOLD", "TheoryConfig", "TrialRecord",
    "ImageConfig", "default_grid", "derive_seed", "identity_sketch", "matvec_cost_ratio",
    "parse_grid", "planted_covariance", "psnr", "run_image", "synthetic_frame",
    "read_records_csv", "records_csv", "run_cov_sketch", "run_phase", "run_timing",
    "run_verify_theory", "strip_timing", "summarize", "validate_records",
]
