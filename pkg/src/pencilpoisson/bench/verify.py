"""Invariant suite behind ``pencilpoisson verify``.

Each check returns ``(name, passed, detail)``. Checks that need a global view
run inside the SPMD harness and compare the assembled result serially.
"""

from __future__ import annotations

import numpy as np

from ..comm import run_spmd
from ..grid import GridSpec, build_process_grid
from ..krylov import KrylovSolver, SolverOptions, apply_laplacian
from ..pencil import DistributedField, assemble, execute_transpose, invert_plan, plan_transpose
from ..spectral import SpectralPlan, dft_forward, dft_inverse, naive_dft
from .cases import TestCase, generate_global
from .oracle import MAX_POINTS, dense_oracle_solve


def _demean(a):
    return a - a.mean()


def check_round_trip(grid: GridSpec, workers: int):
    pgrid = build_process_grid(workers)
    rng = np.random.default_rng(1)
    data = rng.standard_normal(grid.shape)

    def program(rank, comm):
        zy = plan_transpose(grid, pgrid, "z", "y", comm)
        yx = plan_transpose(grid, pgrid, "y", "x", comm)
        f = DistributedField.from_global(zy.source, rank, data)
        g = execute_transpose(zy, f)
        g = execute_transpose(yx, g)
        g = execute_transpose(invert_plan(yx), g)
        return execute_transpose(invert_plan(zy), g)

    err = float(np.abs(assemble(run_spmd(workers, program)) - data).max())
    return "transpose round trip z->y->x->y->z", err <= 1e-12, f"max error {err:.2e}"


def check_dft(grid: GridSpec, workers: int):
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in sorted({grid.nx, grid.ny, 2, 3, 5, 8, 12}):
        line = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ref = naive_dft(line)
        worst = max(worst, float(np.abs(dft_forward(line) - ref).max() / np.abs(ref).max()))
        worst = max(worst, float(np.abs(dft_inverse(dft_forward(line.real)) - line.real).max()))
    return "dft vs naive summation", worst <= 1e-12, f"max relative error {worst:.2e}"


def _solve_all(grid: GridSpec, workers: int, source: np.ndarray, tol: float):
    pgrid = build_process_grid(workers)

    def program(rank, comm):
        plan = SpectralPlan(grid, pgrid, comm)
        src = DistributedField.from_global(plan.z_layout, rank, source)
        out = {"fft": plan.solve(src)}
        for method in ("cg", "bicgstab"):
            solver = KrylovSolver(grid, pgrid, comm, SolverOptions(method=method, tol=tol))
            x, _ = solver.solve(solver.geometry.field(src.values))
            out[method] = x.to_distributed()
        return out

    per_rank = run_spmd(workers, program)
    return {k: assemble([r[k] for r in per_rank]) for k in per_rank[0]}


def check_oracle(grid: GridSpec, workers: int):
    if grid.size > MAX_POINTS:
        return "solvers vs dense oracle", True, f"skipped: {grid.size} points > {MAX_POINTS}"
    source = generate_global(TestCase(grid, "random-smooth", seed=3))
    ref = _demean(dense_oracle_solve(grid, source))
    results = _solve_all(grid, workers, source, tol=1e-10)
    errs = {k: float(np.abs(_demean(v) - ref).max()) for k, v in results.items()}
    detail = ", ".join(f"{k} {e:.2e}" for k, e in errs.items())
    return "solvers vs dense oracle", max(errs.values()) < 1e-8, detail


def check_overlap(grid: GridSpec, workers: int):
    pgrid = build_process_grid(workers)
    data = np.random.default_rng(4).standard_normal(grid.shape)

    def program(rank, comm):
        solver = KrylovSolver(grid, pgrid, comm)
        g = solver.geometry
        a, b = g.from_global(data), g.from_global(data)
        out_a, out_b = g.field(), g.field()
        apply_laplacian(a, out_a, overlap=False)
        apply_laplacian(b, out_b, overlap=True)
        return np.array_equal(out_a.interior, out_b.interior)

    ok = all(run_spmd(workers, program))
    return "overlapped stencil equals blocking stencil", ok, "bitwise" if ok else "mismatch"


def check_worker_independence(grid: GridSpec, workers: int):
    source = generate_global(TestCase(grid, "random-smooth", seed=5))
    one = _solve_all(grid, 1, source, tol=1e-10)["fft"]
    many = _solve_all(grid, workers, source, tol=1e-10)["fft"]
    err = float(np.abs(one - many).max())
    return f"spectral solve 1 vs {workers} workers", err <= 1e-12, f"max difference {err:.2e}"


CHECKS = (check_round_trip, check_dft, check_oracle, check_overlap, check_worker_independence)


def run_verify(grid: GridSpec, workers: int):
    return [check(grid, workers) for check in CHECKS]
