"""Benchmark drivers: accuracy sweep, solver comparison, spin-up, weak scaling.

The sweep, comparison and spin-up drivers are SPMD programs: call them on
every rank with that rank's communicator. Every rank returns the same
records; per-rank quantities (``peak_bytes``) are taken from rank 0, which
owns the largest block under the remainder-first split.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field

from ..comm import run_spmd
from ..grid import GridSpec, build_process_grid
from ..krylov import KrylovSolver, SolverBreakdown, SolverOptions
from ..pencil import DistributedField
from ..spectral import SpectralPlan
from .cases import TestCase, generate_global
from .metrics import mean_difference

RECORD_FIELDS = ("solver", "tol", "mean_diff", "seconds", "iterations", "workers", "peak_bytes")
SCALING_FIELDS = ("solver", "workers", "px", "py", "nx", "ny", "nz", "seconds", "iterations",
                  "messages", "bytes", "reductions", "peak_bytes", "oversubscribed")


@dataclass
class BenchmarkRecord:
    solver: str
    tol: float | None
    mean_diff: float | None
    seconds: float
    iterations: float
    workers: int
    peak_bytes: int
    converged: bool = True
    true_relative_residual: float | None = None
    extra: dict = field(default_factory=dict)


def parse_solver(solver_id: str) -> tuple[str, dict]:
    """``"cg-nopc-noov"`` -> ``("cg", {"postcondition": False, "overlap": False})``."""
    name, *flags = solver_id.split("-")
    if name not in ("fft", "cg", "bicgstab"):
        raise ValueError(f"unknown solver {solver_id!r}")
    opts = {}
    for flag in flags:
        if flag == "nopc":
            opts["postcondition"] = False
        elif flag == "noov":
            opts["overlap"] = False
        elif flag == "nofuse":
            opts["fuse_reductions"] = False
        elif flag == "warm":
            opts["warm_start"] = True
        else:
            raise ValueError(f"unknown solver flag {flag!r} in {solver_id!r}")
    if name == "fft" and opts:
        raise ValueError(f"the fft solver takes no flags: {solver_id!r}")
    return name, opts


def _timed(comm, fn):
    comm.barrier()
    t0 = time.perf_counter()
    result = fn()
    comm.barrier()
    return result, time.perf_counter() - t0


def _iterative(solver: KrylovSolver, source: DistributedField, previous=None):
    g = solver.geometry
    b = g.field(source.values)
    try:
        x, report = solver.solve(b, previous)
    except SolverBreakdown:
        return None, None
    return x, report


def run_accuracy_sweep(tc: TestCase, tolerances, comm, method: str = "cg",
                       postcondition: bool = True, overlap: bool = True, max_iter: int = 1000):
    """One row per tolerance: iterative solve vs the direct solve of the same source."""
    pgrid = build_process_grid(comm.size)
    plan = SpectralPlan(tc.grid, pgrid, comm)
    source = DistributedField.from_global(plan.z_layout, comm.rank, generate_global(tc, 0))
    direct, _ = _timed(comm, lambda: plan.solve(source))

    records = []
    for tol in tolerances:
        opts = SolverOptions(method=method, tol=tol, postcondition=postcondition,
                             overlap=overlap, max_iter=max_iter)
        solver = KrylovSolver(tc.grid, pgrid, comm, opts)
        (x, report), seconds = _timed(comm, lambda: _iterative(solver, source))
        if report is None:
            records.append(BenchmarkRecord(method, tol, math.nan, seconds, math.nan,
                                           comm.size, solver.buffer_bytes, converged=False))
            continue
        diff = mean_difference(x.to_distributed(), direct, comm)
        records.append(BenchmarkRecord(
            method, tol, diff, seconds, report.iterations, comm.size, report.peak_bytes,
            converged=report.converged, true_relative_residual=report.true_relative_residual,
        ))
    return _rank0_bytes(records, comm)


def _rank0_bytes(records, comm):
    values = comm.allreduce_sum([r.peak_bytes if comm.rank == 0 else 0 for r in records] or [0])
    for r, v in zip(records, values):
        r.peak_bytes = int(v)
    return records


def run_spinup_sequence(tc: TestCase, comm, opts: SolverOptions):
    """Solve every step of ``tc`` in order; returns one SolveReport per step."""
    pgrid = build_process_grid(comm.size)
    solver = KrylovSolver(tc.grid, pgrid, comm, opts)
    layout = solver.geometry.layout
    reports, previous = [], None
    for step in range(tc.steps):
        source = DistributedField.from_global(layout, comm.rank, generate_global(tc, step))
        x, report = solver.solve(solver.geometry.field(source.values), previous)
        reports.append(report)
        previous = x
    return reports


def run_solver_comparison(tc: TestCase, solvers, comm, tol: float = 1e-6, max_iter: int = 1000):
    """One row per solver id, averaged over the steps of ``tc``.

    ``mean_diff`` is measured against the direct solve of each step; the
    ``iterations`` column is the mean iteration count per solve.
    """
    pgrid = build_process_grid(comm.size)
    plan = SpectralPlan(tc.grid, pgrid, comm)
    sources = [DistributedField.from_global(plan.z_layout, comm.rank, generate_global(tc, s))
               for s in range(tc.steps)]
    directs = []
    fft_seconds = 0.0
    for src in sources:
        d, sec = _timed(comm, lambda: plan.solve(src))
        directs.append(d)
        fft_seconds += sec

    records = []
    for solver_id in solvers:
        name, flags = parse_solver(solver_id)
        if name == "fft":
            records.append(BenchmarkRecord(solver_id, None, 0.0, fft_seconds / tc.steps, 0,
                                           comm.size, plan.buffer_bytes))
            continue
        opts = SolverOptions(method=name, tol=tol, max_iter=max_iter, **flags)
        solver = KrylovSolver(tc.grid, pgrid, comm, opts)
        total_sec = total_it = total_diff = 0.0
        converged, previous, worst = True, None, 0.0
        for src, direct in zip(sources, directs):
            (x, report), sec = _timed(comm, lambda: _iterative(solver, src, previous))
            total_sec += sec
            if report is None:
                converged = False
                total_diff = math.nan
                break
            converged &= report.converged
            total_it += report.iterations
            worst = max(worst, report.true_relative_residual)
            total_diff += mean_difference(x.to_distributed(), direct, comm)
            previous = x
        records.append(BenchmarkRecord(
            solver_id, tol, total_diff / tc.steps, total_sec / tc.steps, total_it / tc.steps,
            comm.size, solver.buffer_bytes, converged=converged, true_relative_residual=worst,
        ))
    return _rank0_bytes(records, comm)


def run_weak_scaling(local: GridSpec, workers, method: str = "cg", tol: float = 1e-6,
                     seed: int = 0, repeats: int = 1, postcondition: bool = True,
                     overlap: bool = True, timeout: float = 120.0):
    """Fixed points per worker; the global grid grows with the process grid.

    Message and byte counts are summed over ranks and averaged per solve.
    """
    host = os.cpu_count() or 1
    records = []
    for nworkers in workers:
        pgrid = build_process_grid(nworkers)
        grid = GridSpec(local.nx * pgrid.px, local.ny * pgrid.py, local.nz,
                        local.dx, local.dy, local.dz)
        tc = TestCase(grid, "random-smooth", seed)
        source_global = generate_global(tc, 0)

        def program(rank, comm):
            plan = SpectralPlan(grid, pgrid, comm)
            src = DistributedField.from_global(plan.z_layout, rank, source_global)
            rows = {}
            before = comm.stats.snapshot()
            fft_sec = 0.0
            for _ in range(repeats):
                _, sec = _timed(comm, lambda: plan.solve(src))
                fft_sec += sec
            delta = comm.stats.since(before)
            rows["fft"] = dict(seconds=fft_sec / repeats, iterations=0,
                               messages=(delta.messages) / repeats, bytes=delta.bytes / repeats,
                               reductions=0, peak_bytes=plan.buffer_bytes, converged=True)
            opts = SolverOptions(method=method, tol=tol, postcondition=postcondition, overlap=overlap)
            solver = KrylovSolver(grid, pgrid, comm, opts)
            it_sec, report = 0.0, None
            for _ in range(repeats):
                (x, report), sec = _timed(comm, lambda: _iterative(solver, src))
                it_sec += sec
            rows[method] = dict(seconds=it_sec / repeats,
                                iterations=report.iterations if report else math.nan,
                                messages=report.messages if report else 0,
                                bytes=report.bytes if report else 0,
                                reductions=report.reductions if report else 0,
                                peak_bytes=solver.buffer_bytes,
                                converged=bool(report and report.converged))
            return rows

        per_rank = run_spmd(nworkers, program, timeout=timeout)
        for solver_id in ("fft", method):
            rows = [r[solver_id] for r in per_rank]
            first = rows[0]
            records.append(BenchmarkRecord(
                solver_id, None if solver_id == "fft" else tol, None, first["seconds"],
                first["iterations"], nworkers, first["peak_bytes"],
                converged=all(r["converged"] for r in rows),
                extra=dict(px=pgrid.px, py=pgrid.py, nx=grid.nx, ny=grid.ny, nz=grid.nz,
                           messages=sum(r["messages"] for r in rows),
                           bytes=sum(r["bytes"] for r in rows),
                           reductions=first["reductions"],
                           oversubscribed=int(nworkers > host)),
            ))
    return records


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        return f"{value:.6e}"
    return str(value)


def records_to_csv(records, scaling: bool = False, timing: bool = True) -> str:
    """CSV text; with ``timing=False`` the seconds column is left empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    fields = SCALING_FIELDS if scaling else RECORD_FIELDS
    writer.writerow(fields)
    for r in records:
        row = {**vars(r), **r.extra}
        if not timing:
            row["seconds"] = None
        writer.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()
