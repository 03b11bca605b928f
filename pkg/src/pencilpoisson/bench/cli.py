"""Command line entry point: ``pencilpoisson {verify,sweep,compare,scale}``.

Exit codes: 0 success, 1 solver failure (or a failed verify check),
2 bad arguments.
"""

from __future__ import annotations

import argparse
import os
import sys

from ..comm import run_spmd
from ..grid import DecompositionError, GridSpec, PencilLayout, build_process_grid
from .cases import GENERATORS, TestCase
from .runs import (
    parse_solver,
    records_to_csv,
    run_accuracy_sweep,
    run_solver_comparison,
    run_weak_scaling,
)
from .verify import run_verify

WORKERS_ENV = "PENCILPOISSON_WORKERS"


def _triple(kind, cast):
    def parse(text):
        parts = text.split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated {kind} values, got {text!r}")
        try:
            values = tuple(cast(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"could not parse {text!r} as {kind} values") from None
        if any(v <= 0 for v in values):
            raise argparse.ArgumentTypeError(f"{kind} values must be positive, got {text!r}")
        return values
    return parse


def _float_list(text):
    try:
        values = [float(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"could not parse tolerance list {text!r}") from None
    if not values or any(not 0 < v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"tolerances must lie in (0, 1), got {text!r}")
    return values


def _int_list(text):
    try:
        values = [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"could not parse worker list {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"worker counts must be >= 1, got {text!r}")
    return values


def _default_workers():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        return int(raw)
    except ValueError:
        return None  # reported during validation


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grid", type=_triple("grid", int), required=True, metavar="NX,NY,NZ",
                        help="global grid size (local size per worker for 'scale')")
    common.add_argument("--spacing", type=_triple("spacing", float), default=(1.0, 1.0, 1.0),
                        metavar="DX,DY,DZ")
    common.add_argument("--workers", type=int, default=_default_workers(),
                        help=f"number of SPMD workers (default ${WORKERS_ENV} or 1)")
    common.add_argument("--solver", choices=("fft", "cg", "bicgstab"), default=None,
                        help="iterative family (default cg); compare runs every configuration when omitted")
    common.add_argument("--tol", type=float, default=1e-6, metavar="RHO")
    common.add_argument("--max-iter", type=int, default=1000)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--steps", type=int, default=1)
    common.add_argument("--decay", type=float, default=0.5)
    common.add_argument("--generator", choices=GENERATORS, default=None,
                        help="source generator (default random-smooth, spinup-sequence when --steps > 1)")
    common.add_argument("--out", metavar="FILE.csv", help="write CSV here instead of stdout")
    common.add_argument("--no-postcond", action="store_true")
    common.add_argument("--no-overlap", action="store_true")
    common.add_argument("--warm-start", action="store_true")
    common.add_argument("--no-timing", action="store_true", help="leave the seconds column empty")

    parser = argparse.ArgumentParser(prog="pencilpoisson", description="Pencil-decomposed Poisson solver benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common], help="run the oracle and round-trip checks")
    sweep = sub.add_parser("sweep", parents=[common], help="iterative accuracy vs tolerance")
    sweep.add_argument("--tol-list", type=_float_list, default=[1e-2, 1e-4, 1e-6, 1e-8], metavar="T1,T2,...")
    compare = sub.add_parser("compare", parents=[common], help="compare solver configurations")
    compare.add_argument("--solvers", default=None, metavar="ID,ID,...",
                         help="solver ids such as fft,cg,cg-nopc,bicgstab-noov (default: all)")
    scale = sub.add_parser("scale", parents=[common], help="weak scaling with fixed points per worker")
    scale.add_argument("--workers-list", type=_int_list, default=[1, 2, 4, 8], metavar="N1,N2,...")
    scale.add_argument("--repeats", type=int, default=1)
    return parser


def _validate(parser, args):
    if args.workers is None or args.workers < 1:
        parser.error(f"--workers (or ${WORKERS_ENV}) must be a positive integer")
    if not 0 < args.tol < 1:
        parser.error(f"--tol must lie in (0, 1), got {args.tol}")
    if args.steps < 1:
        parser.error(f"--steps must be >= 1, got {args.steps}")
    if args.max_iter < 1:
        parser.error(f"--max-iter must be >= 1, got {args.max_iter}")
    if not 0 <= args.decay < 1:
        parser.error(f"--decay must lie in [0, 1), got {args.decay}")
    if args.command != "compare" and args.solver is None:
        args.solver = "cg"
    if args.command == "sweep" and args.solver == "fft":
        parser.error("sweep compares an iterative solver against fft; use --solver cg or bicgstab")
    if args.command == "scale" and args.solver == "fft":
        parser.error("scale always runs fft; pick the iterative family with --solver cg or bicgstab")
    if args.command != "scale":
        pgrid = build_process_grid(args.workers)
        try:
            for orientation in ("z", "y", "x"):
                PencilLayout(orientation, GridSpec(*args.grid, *args.spacing), pgrid)
        except DecompositionError as exc:
            parser.error(f"{exc}; use fewer --workers or a larger --grid")


def _test_case(args, grid):
    generator = args.generator or ("spinup-sequence" if args.steps > 1 else "random-smooth")
    return TestCase(grid, generator, args.seed, steps=args.steps, decay=args.decay)


def _solver_id(name, args):
    flags = ""
    if args.no_postcond:
        flags += "-nopc"
    if args.no_overlap:
        flags += "-noov"
    if args.warm_start:
        flags += "-warm"
    return name + flags


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    grid = GridSpec(*args.grid, *args.spacing)

    if args.command == "verify":
        results = run_verify(grid, args.workers)
        for name, passed, detail in results:
            print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return 0 if all(p for _, p, _ in results) else 1

    if args.command == "scale":
        records = run_weak_scaling(grid, args.workers_list, method=args.solver, tol=args.tol,
                                   seed=args.seed, repeats=args.repeats,
                                   postcondition=not args.no_postcond, overlap=not args.no_overlap)
        _emit(records_to_csv(records, scaling=True, timing=not args.no_timing), args.out)
        return 0 if all(r.converged for r in records) else 1

    tc = _test_case(args, grid)
    if args.command == "sweep":
        def program(rank, comm):
            return run_accuracy_sweep(tc, args.tol_list, comm, method=args.solver,
                                      postcondition=not args.no_postcond,
                                      overlap=not args.no_overlap, max_iter=args.max_iter)
    else:
        if args.solvers:
            solvers = [s for s in args.solvers.split(",") if s]
        elif args.solver is None:
            solvers = ["fft", "cg", "cg-nopc", "cg-noov", "bicgstab", "bicgstab-nopc", "bicgstab-noov"]
            if args.warm_start:
                solvers = [s if s == "fft" else s + "-warm" for s in solvers]
        elif args.solver == "fft":
            solvers = ["fft"]
        else:
            solvers = ["fft", _solver_id(args.solver, args)]
        try:
            for s in solvers:
                parse_solver(s)
        except ValueError as exc:
            parser.error(str(exc))

        def program(rank, comm):
            return run_solver_comparison(tc, solvers, comm, tol=args.tol, max_iter=args.max_iter)

    records = run_spmd(args.workers, program)[0]
    _emit(records_to_csv(records, timing=not args.no_timing), args.out)
    return 0 if all(r.converged for r in records) else 1


if __name__ == "__main__":
    sys.exit(main())
