"""Dense reference solve of the periodic/Neumann 7-point Laplacian."""

from __future__ import annotations

import numpy as np

from ..grid import GridSpec

MAX_POINTS = 4096


def assemble_laplacian(grid: GridSpec) -> np.ndarray:
    """Dense operator, unknowns ordered ``(i * ny + j) * nz + k``."""
    nx, ny, nz = grid.shape
    n = grid.size
    if n > MAX_POINTS:
        raise ValueError(f"dense operator limited to {MAX_POINTS} points, grid has {n}")
    index = np.arange(n).reshape(grid.shape)
    a = np.zeros((n, n))
    rows = index.ravel()
    for axis, h in ((0, grid.dx), (1, grid.dy)):
        for shift in (1, -1):
            cols = np.roll(index, -shift, axis=axis).ravel()
            np.add.at(a, (rows, cols), 1.0 / h ** 2)
            np.add.at(a, (rows, rows), -1.0 / h ** 2)
    for shift in (1, -1):
        k = np.arange(nz) + shift
        ok = (k >= 0) & (k < nz)
        src = index[:, :, ok].ravel()
        dst = index[:, :, k[ok]].ravel()
        np.add.at(a, (src, dst), 1.0 / grid.dz ** 2)
        np.add.at(a, (src, src), -1.0 / grid.dz ** 2)
    return a


def dense_oracle_solve(grid: GridSpec, b) -> np.ndarray:
    """Solve ``A p = b - mean(b)`` with ``p[0, 0, 0] = 0`` by LU with partial pivoting."""
    b = np.asarray(b, dtype=float)
    if b.shape != grid.shape:
        raise ValueError(f"source shape {b.shape} != grid shape {grid.shape}")
    a = assemble_laplacian(grid)
    rhs = (b - b.mean()).ravel()
    a[0, :] = 0.0
    a[0, 0] = 1.0
    rhs[0] = 0.0
    return np.linalg.solve(a, rhs).reshape(grid.shape)
