"""Command-line entry point: ``expander-bp <subcommand> [options]``.

Exit status is 0 on success, 1 on invalid input and 2 when a theory check
finds a bound violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .analysis import DomainError
from .block_model import GroupModel, ModelError
from .expander import (ExpanderError, check_expansion, construct_random, deserialize,
                       serialize)
from .solver import (Constraint, InputError, RecoveryProblem, SolverConfig, expander_operator,
                     solve)

THREADS_ENV = "EXPANDER_BP_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_VIOLATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--out", default=None, help="output file (gen) or directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--threads", type=int, default=1,
                        help=f"worker processes; {THREADS_ENV} overrides")
    return common


def _solver_args(p: argparse.ArgumentParser, default: SolverConfig) -> None:
    p.add_argument("--rel-tol", type=float, default=default.rel_tol)
    p.add_argument("--max-iter", type=int, default=default.max_iter)


def _solver_config(args, base: SolverConfig) -> SolverConfig:
    return SolverConfig(max_iter=args.max_iter, rel_tol=args.rel_tol,
                        step_ratio=base.step_ratio, norm_estimate_iters=base.norm_estimate_iters)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expander-bp",
                     description="Group-sparse recovery with sparse expander sketches.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    p = sub.add_parser("gen", parents=[common], help="draw a random expander")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)

    p = sub.add_parser("check-expansion", parents=[common], help="expansion of k-group unions")
    p.add_argument("--matrix", required=True)
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=("exhaustive", "sampled"), default="exhaustive")
    p.add_argument("--trials", type=int, default=10000)

    p = sub.add_parser("solve", parents=[common], help="recover a vector from measurements")
    p.add_argument("--matrix", required=True)
    p.add_argument("--y", required=True, help=".npy or whitespace-separated text")
    p.add_argument("--g", type=int, default=1)
    p.add_argument("--objective", choices=("l1", "l21"), default="l21")
    p.add_argument("--constraint", choices=("equality", "l1_ball", "l2_ball"),
                   default="equality")
    p.add_argument("--radius", type=float, default=0.0)
    _solver_args(p, SolverConfig())

    for name, solver in (("phase", harness.PHASE_SOLVER), ("timing", harness.TIMING_SOLVER)):
        p = sub.add_parser(name, parents=[common], help=f"{name} experiment")
        p.add_argument("--p", type=int, nargs="+",
                       default=[1000] if name == "phase" else [10000, 20000])
        p.add_argument("--M", type=int, default=None,
                       help="number of groups; default 100 (phase) or p/10 (timing)")
        p.add_argument("--k", type=int, default=8 if name == "phase" else 30)
        p.add_argument("--n-grid", default=None, help="start:stop:step or comma list")
        p.add_argument("--mc", type=int, default=10 if name == "phase" else 3)
        p.add_argument("--d", type=int, default=None, help="default: experimental rule")
        p.add_argument("--matrix-kind", choices=("expander", "gaussian", "both"),
                       default="expander" if name == "phase" else "both")
        p.add_argument("--objective", choices=("l1", "l21", "both"),
                       default="both" if name == "phase" else "l21")
        p.add_argument("--signal", choices=("gaussian", "sign", "both"), default="gaussian")
        p.add_argument("--cap", type=float, default=None, help="wall-clock cap per solve (s)")
        p.add_argument("--dense-budget", type=int, default=harness.DENSE_BUDGET)
        _solver_args(p, solver)

    p = sub.add_parser("cov-sketch", parents=[common], help="sketched covariance recovery")
    p.add_argument("--sqrt-p", type=int, default=32)
    p.add_argument("--sqrt-n", type=int, default=16)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--q", type=int, default=5000)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--group-g", type=int, default=None)
    p.add_argument("--repeats", type=int, default=1, help="seeds seed..seed+repeats-1")

    p = sub.add_parser("verify-theory", parents=[common], help="check the recovery bounds")
    p.add_argument("--p", type=int, default=60)
    p.add_argument("--M", type=int, default=20)
    p.add_argument("--k-values", default="1,2,3")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--no-noisy", action="store_true")
    p.add_argument("--kernel-samples", type=int, default=1000)
    p.add_argument("--matrix", default=None, help="use this expander for every instance")
    p.add_argument("--epsilon", type=float, default=None, help="asserted expansion constant")
    _solver_args(p, harness.THEORY_SOLVER)
    return parser


def _workers(args) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, args.threads)


def _out_dir(args, default: str) -> Path:
    return Path(args.out if args.out else default)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _load_vector(path) -> np.ndarray:
    if str(path).endswith(".npy"):
        return np.load(path)
    return np.loadtxt(path, ndmin=1)


def _cmd_gen(args) -> int:
    X = construct_random(args.p, args.n, args.d, args.seed)
    path = Path(args.out or "expander.expd")
    serialize(X, path)
    print(f"wrote {path}: {X.n_rows}x{X.n_cols}, d={X.degree}, seed={args.seed}")
    return EXIT_OK


def _cmd_check(args) -> int:
    X = deserialize(args.matrix)
    model = GroupModel.consecutive(X.n_cols, args.g)
    rep = check_expansion(X, model, args.k, args.mode, trials=args.trials, seed=args.seed)
    if args.out:
        _write_json(Path(args.out) / "expansion.json", rep.to_dict())
    label = "certified" if rep.exhaustive else "estimated"
    print(f"{label} epsilon={rep.epsilon:.6g} over {rep.sets_checked} sets of {args.k} groups; "
          f"worst set {list(rep.worst_set)}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    X = deserialize(args.matrix)
    y = _load_vector(args.y)
    model = GroupModel.consecutive(X.n_cols, args.g) if args.objective == "l21" else None
    constraint = (Constraint.equality() if args.constraint == "equality"
                  else Constraint(args.constraint, args.radius))
    rep = solve(RecoveryProblem(expander_operator(X), y, model, constraint),
                _solver_config(args, SolverConfig()))
    out = _out_dir(args, ".")
    _write_json(out / "solve.json", rep.to_dict())
    print(f"iterations={rep.iterations} converged={rep.converged} objective={rep.objective:.6g} "
          f"residual_l2={rep.residual_l2:.3e}")
    return EXIT_OK


def _experiment(args, name: str) -> int:
    base = harness.PHASE_SOLVER if name == "phase" else harness.TIMING_SOLVER
    results = []
    for p in args.p:
        grid = harness.parse_grid(args.n_grid, p) if args.n_grid else ()
        M = args.M or (100 if name == "phase" else p // 10)
        config = harness.ExperimentConfig(
            experiment=name, p=p, M=M, k=args.k, n_grid=tuple(grid),
            matrix_kind=args.matrix_kind, objective=args.objective, d=args.d,
            signal=args.signal, monte_carlo=args.mc, master_seed=args.seed,
            solver=_solver_config(args, base), wall_clock_cap=args.cap,
            dense_budget=args.dense_budget)
        run = harness.run_phase if name == "phase" else harness.run_timing
        results.append(run(config, workers=_workers(args)))
    records = [r for res in results for r in res.records]
    merged = harness.ExperimentResult(
        sorted(records, key=harness.TrialRecord.key), harness.summarize(records),
        {"experiment": name, "runs": [res.metadata for res in results]},
        {"runs": [res.timing for res in results]} if name == "timing" else {})
    out = _out_dir(args, name)
    merged.write(out, args.format)
    bad = harness.validate_records(records)
    if bad:
        print(f"{len(bad)} records failed validation", file=sys.stderr)
        return EXIT_INPUT
    rates = ", ".join(f"{row['method']}/{row['matrix']}@n={row['n']}: {float(row['success_rate']):.2f}"
                      for row in merged.summary)
    print(f"{name}: {len(records)} trials written to {out}; {rates}")
    return EXIT_OK


def _cmd_cov(args) -> int:
    reports = []
    for r in range(args.repeats):
        cfg = harness.CovSketchConfig(sqrt_p=args.sqrt_p, sqrt_n=args.sqrt_n, d=args.d, q=args.q,
                                      k=args.k, cov_group_g=args.group_g, seed=args.seed + r)
        reports.append(harness.run_cov_sketch(cfg).to_dict())
    out = _out_dir(args, "cov-sketch")
    if args.format == "json":
        _write_json(out / "cov_sketch.json", reports)
    else:
        cols = ("seed", "precision", "recall", "err_l2", "rel_err", "iterations", "converged")
        rows = [dict(rep, seed=args.seed + i) for i, rep in enumerate(reports)]
        out.mkdir(parents=True, exist_ok=True)
        (out / "cov_sketch.csv").write_text(harness.rows_csv(rows, cols))
    recall = np.mean([rep["recall"] for rep in reports])
    precision = np.mean([rep["precision"] for rep in reports])
    print(f"cov-sketch: mean recall={recall:.3f} precision={precision:.3f} over {len(reports)} runs")
    return EXIT_OK


def _cmd_theory(args) -> int:
    k_values = tuple(int(k) for k in args.k_values.split(","))
    matrix = deserialize(args.matrix) if args.matrix else None
    config = harness.TheoryConfig(
        p=args.p, M=args.M, k_values=k_values, instances=args.instances, n=args.n, d=args.d,
        noisy=not args.no_noisy, kernel_samples=args.kernel_samples, master_seed=args.seed,
        solver=_solver_config(args, harness.THEORY_SOLVER), matrix=matrix, epsilon=args.epsilon)
    bundle = harness.run_verify_theory(config, workers=_workers(args))
    out = _out_dir(args, "verify-theory")
    _write_json(out / "bundle.json", bundle)
    s = bundle["summary"]
    print(f"verify-theory: {s['theorem_instances']} noiseless + {s['corollary_instances']} noisy "
          f"instances, {s['violations']} violations")
    if s["violations"]:
        replay = out / "replay.json"
        _write_json(replay, {"cases": harness.replay_cases(bundle),
                             "kernel_lemma": bundle["kernel_lemma"]})
        print(f"bound violated; offending instances written to {replay}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


COMMANDS = {
    "gen": _cmd_gen,
    "check-expansion": _cmd_check,
    "solve": _cmd_solve,
    "phase": lambda a: _experiment(a, "phase"),
    "timing": lambda a: _experiment(a, "timing"),
    "cov-sketch": _cmd_cov,
    "verify-theory": _cmd_theory,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (harness.ConfigError, ModelError, ExpanderError, InputError, DomainError,
            harness.ResourceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
