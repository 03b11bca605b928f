"""Direct pressure solver: pencil FFTs in x and y, Thomas solves in z.

Horizontal boundaries are periodic and the horizontal transforms diagonalise
the 5-point horizontal second difference exactly, so each horizontal mode
``(kx, ky)`` leaves a tridiagonal system in z with the shift
``lambda_x(kx) + lambda_y(ky)``. Vertical boundaries are Neumann (ghost
reflection). The ``(0, 0)`` mode is singular; its first row is replaced by
``p[0] = 0`` and its right-hand side is dropped, so the returned pressure
satisfies ``laplacian(p) == source - horizontal_mean(source)``.
"""

from __future__ import annotations

import cmath
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridSpec, PencilLayout, ProcessGrid, horizontal_eigenvalues
from .pencil import DistributedField, LayoutMismatch, execute_transpose, invert_plan, plan_transpose

PIVOT_RTOL = 1e-14
_RADICES = (4, 2, 3, 5, 7)


class SingularSystemError(ArithmeticError):
    pass


# -- 1D transforms ---------------------------------------------------------

def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


class FFTPlan:
    """Twiddles and factorization for length-``n`` transforms along the last axis.

    Decimation in time over the radices 4, 2, 3, 5 and 7; whatever is left
    (1 or a prime above 7) is handled by a dense DFT matrix.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"transform length must be >= 1, got {n}")
        self.n = n
        self.stages = []  # (radix, sub-length, twiddles radix x sub, radix DFT matrix)
        m = n
        while True:
            p = next((r for r in _RADICES if m % r == 0 and m > r), None)
            if p is None:
                break
            sub = m // p
            r, k1 = np.meshgrid(np.arange(p), np.arange(sub), indexing="ij")
            self.stages.append((p, sub, np.exp(-2j * np.pi * r * k1 / m), _dft_matrix(p)))
            m = sub
        self.leaf = _dft_matrix(m).T.copy()

    def _run(self, x: np.ndarray, level: int) -> np.ndarray:
        if level == len(self.stages):
            return x @ self.leaf
        p, sub, twiddle, wp = self.stages[level]
        batch = x.shape[0]
        # x[j*p + r] -> row r, column j
        parts = x.reshape(batch, sub, p).transpose(0, 2, 1).reshape(batch * p, sub)
        f = self._run(parts, level + 1).reshape(batch, p, sub)
        f *= twiddle
        return np.matmul(wp, f).reshape(batch, p * sub)

    def forward(self, lines: np.ndarray) -> np.ndarray:
        """Unnormalised forward DFT of every line (last axis)."""
        lines = np.asarray(lines, dtype=complex)
        shape = lines.shape
        if shape[-1] != self.n:
            raise ValueError(f"line length {shape[-1]} != plan length {self.n}")
        flat = np.ascontiguousarray(lines).reshape(-1, self.n)
        return self._run(flat, 0).reshape(shape)

    def inverse(self, spectra: np.ndarray) -> np.ndarray:
        """Inverse DFT including the ``1/n`` factor."""
        spectra = np.asarray(spectra, dtype=complex)
        return np.conj(self.forward(np.conj(spectra))) / self.n


@lru_cache(maxsize=64)
def _cached_plan(n: int) -> FFTPlan:
    return FFTPlan(n)


def dft_forward(line) -> np.ndarray:
    """Forward DFT of a real (or complex) line, ``X[k] = sum_j x[j] exp(-2 pi i jk/n)``."""
    line = np.asarray(line)
    return _cached_plan(line.shape[-1]).forward(line)


def dft_inverse(line) -> np.ndarray:
    """Inverse DFT returning the real part; inverse(forward(x)) == x."""
    line = np.asarray(line)
    return _cached_plan(line.shape[-1]).inverse(line).real


def naive_dft(line) -> np.ndarray:
    """O(n^2) reference summation, written out element by element."""
    x = [complex(v) for v in np.asarray(line).ravel()]
    n = len(x)
    return np.array(
        [sum(x[j] * cmath.exp(-2j * cmath.pi * j * k / n) for j in range(n)) for k in range(n)]
    )


# -- tridiagonal systems ----------------------------------------------------

@dataclass
class TridiagonalSystem:
    """``a`` is the sub-diagonal (row k multiplies x[k-1] by a[k-1]), ``c`` the super-diagonal."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.d = np.asarray(self.d)
        n = self.b.shape[-1]
        if n < 1 or self.a.shape[-1] != n - 1 or self.c.shape[-1] != n - 1 or self.d.shape[-1] != n:
            raise ValueError("inconsistent tridiagonal system lengths")

    @property
    def n(self) -> int:
        return self.b.shape[-1]

    def dense(self) -> np.ndarray:
        return np.diag(self.b) + np.diag(self.a, -1) + np.diag(self.c, 1)


def thomas_factor(a, b, c):
    """Forward-elimination factors for one or many systems (last axis is the line).

    Returns ``(cprime, inv_pivot)``; reuse them with :func:`thomas_apply` for any
    number of right-hand sides.
    """
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    n = b.shape[-1]
    scale = np.max(np.abs(b), axis=-1, initial=0.0)
    if n > 1:
        scale = np.maximum(scale, np.max(np.abs(a), axis=-1))
        scale = np.maximum(scale, np.max(np.abs(c), axis=-1))
    a = np.broadcast_to(a, b.shape[:-1] + (n - 1,))
    c = np.broadcast_to(c, b.shape[:-1] + (n - 1,))
    cprime = np.empty(b.shape[:-1] + (n - 1,))
    inv_pivot = np.empty(b.shape)
    pivot = b[..., 0]
    for k in range(n):
        if k:
            pivot = b[..., k] - a[..., k - 1] * cprime[..., k - 1]
        if np.any(np.abs(pivot) <= PIVOT_RTOL * scale):
            raise SingularSystemError(f"zero pivot in row {k} of tridiagonal system")
        inv_pivot[..., k] = 1.0 / pivot
        if k < n - 1:
            cprime[..., k] = c[..., k] * inv_pivot[..., k]
    return cprime, inv_pivot


def thomas_apply(factors, a, d, out=None):
    """Solve with precomputed factors. ``d`` may be real or complex; ``out`` may alias ``d``."""
    cprime, inv_pivot = factors
    n = inv_pivot.shape[-1]
    a = np.broadcast_to(np.asarray(a, dtype=float), inv_pivot.shape[:-1] + (n - 1,))
    if out is None:
        out = np.empty(np.broadcast_shapes(d.shape, inv_pivot.shape), dtype=np.result_type(d, float))
    out[..., 0] = d[..., 0] * inv_pivot[..., 0]
    for k in range(1, n):
        out[..., k] = (d[..., k] - a[..., k - 1] * out[..., k - 1]) * inv_pivot[..., k]
    for k in range(n - 2, -1, -1):
        out[..., k] -= cprime[..., k] * out[..., k + 1]
    return out


def thomas_solve(system: TridiagonalSystem) -> np.ndarray:
    """Solve one tridiagonal system in O(n)."""
    a, b, c, d = system.a, system.b, system.c, system.d
    n = system.n
    scale = max(np.max(np.abs(b)), np.max(np.abs(a), initial=0.0), np.max(np.abs(c), initial=0.0))
    cp = np.empty(n)  # the one scratch line
    x = np.array(d, dtype=np.result_type(d, float))
    for k in range(n):
        pivot = b[k] - (a[k - 1] * cp[k - 1] if k else 0.0)
        if abs(pivot) <= PIVOT_RTOL * scale:
            raise SingularSystemError(f"zero pivot in row {k} of tridiagonal system")
        if k < n - 1:
            cp[k] = c[k] / pivot
        x[k] = (x[k] - (a[k - 1] * x[k - 1] if k else 0.0)) / pivot
    for k in range(n - 2, -1, -1):
        x[k] -= cp[k] * x[k + 1]
    return x


def vertical_coefficients(lambda_h, nz: int, dz: float):
    """Diagonals of ``d2/dz2 + lambda_h`` with Neumann ends, pinned where ``lambda_h == 0``.

    ``lambda_h`` may be an array of shifts; the returned ``b`` and ``c`` then
    carry its leading shape.
    """
    lam = np.asarray(lambda_h, dtype=float)
    inv = 1.0 / (dz * dz)
    b = np.empty(lam.shape + (nz,))
    b[...] = (-2.0 * inv + lam)[..., None]
    b[..., 0] += inv
    b[..., -1] += inv
    a = np.full(nz - 1, inv)
    c = np.full(lam.shape + (nz - 1,), inv)
    null = lam == 0.0
    b[null, 0] = 1.0
    if nz > 1:
        c[null, 0] = 0.0
    return a, b, c


def build_vertical_system(lambda_h: float, grid: GridSpec, rhs_column):
    """Real and imaginary tridiagonal systems for one horizontal mode."""
    if lambda_h > 0:
        raise ValueError(f"horizontal shift must be <= 0, got {lambda_h}")
    rhs = np.asarray(rhs_column, dtype=complex)
    a, b, c = vertical_coefficients(lambda_h, grid.nz, grid.dz)
    d_re, d_im = rhs.real.copy(), rhs.imag.copy()
    if lambda_h == 0:
        d_re[0] = d_im[0] = 0.0
    return TridiagonalSystem(a, b, c, d_re), TridiagonalSystem(a, b, c, d_im)


# -- full solver ------------------------------------------------------------

class SpectralPlan:
    """Everything one rank needs for repeated direct solves on a fixed grid."""

    def __init__(self, grid: GridSpec, pgrid: ProcessGrid, comm):
        self.grid = grid
        self.pgrid = pgrid
        self.comm = comm
        self.rank = comm.rank
        self.zy = plan_transpose(grid, pgrid, "z", "y", comm)
        self.yx = plan_transpose(grid, pgrid, "y", "x", comm)
        self.yz = invert_plan(self.zy)
        self.xy = invert_plan(self.yx)
        self.fft_x = FFTPlan(grid.nx)
        self.fft_y = FFTPlan(grid.ny)

        self.z_layout = self.zy.source
        self.y_layout = self.zy.target
        self.x_layout = self.yx.target
        r = self.rank
        self.y_real = DistributedField.zeros(self.y_layout, r, float)
        self.y_work = DistributedField.zeros(self.y_layout, r, complex)
        self.x_work = DistributedField.zeros(self.x_layout, r, complex)
        self.z_work = DistributedField.zeros(self.z_layout, r, complex)

        (x0, x1), (y0, y1), _ = self.z_layout.box(r)
        lam = (horizontal_eigenvalues(grid.nx, grid.dx)[x0:x1, None]
               + horizontal_eigenvalues(grid.ny, grid.dy)[None, y0:y1])
        self.null_mode = lam == 0.0
        self.sub, diag, sup = vertical_coefficients(lam, grid.nz, grid.dz)
        self.factors = thomas_factor(self.sub, diag, sup)
        self.last_imag_residue = 0.0

    @property
    def buffer_bytes(self) -> int:
        """Bytes owned by the plan: transpose buffers plus the work pencils."""
        works = (self.y_real, self.y_work, self.x_work, self.z_work)
        tables = self.factors[0].nbytes + self.factors[1].nbytes
        return self.zy.buffer_bytes + self.yx.buffer_bytes + sum(w.values.nbytes for w in works) + tables

    def solve(self, source: DistributedField, out: DistributedField | None = None,
              tridiagonal: bool = True) -> DistributedField:
        return fft_poisson_solve(self, source, out=out, tridiagonal=tridiagonal)


def fft_poisson_solve(plan: SpectralPlan, source: DistributedField, comm=None,
                      out: DistributedField | None = None, tridiagonal: bool = True) -> DistributedField:
    """Solve ``laplacian(p) = source`` for a real z-pencil ``source``.

    With ``tridiagonal=False`` the vertical solve is skipped, which turns the
    call into a forward/backward transform round trip.
    """
    if source.layout != plan.z_layout or source.rank != plan.rank:
        raise LayoutMismatch("source field does not match the spectral plan's z-pencil layout")
    if np.iscomplexobj(source.values):
        raise TypeError("source must be real valued")
    if out is None:
        out = DistributedField.zeros(plan.z_layout, plan.rank, float)

    yr, yc, xc, zc = plan.y_real, plan.y_work, plan.x_work, plan.z_work

    execute_transpose(plan.zy, source, yr)
    np.copyto(yc.values, plan.fft_y.forward(yr.values))
    execute_transpose(plan.yx, yc, xc)
    np.copyto(xc.values, plan.fft_x.forward(xc.values))
    execute_transpose(plan.xy, xc, yc)
    execute_transpose(plan.yz, yc, zc)

    if tridiagonal:
        zc.values[plan.null_mode, :] = 0.0
        thomas_apply(plan.factors, plan.sub, zc.values, out=zc.values)

    execute_transpose(plan.zy, zc, yc)
    execute_transpose(plan.yx, yc, xc)
    np.copyto(xc.values, plan.fft_x.inverse(xc.values))
    execute_transpose(plan.xy, xc, yc)
    lines = plan.fft_y.inverse(yc.values)
    plan.last_imag_residue = float(np.max(np.abs(lines.imag), initial=0.0))
    np.copyto(yr.values, lines.real)
    execute_transpose(plan.yz, yr, out)
    return out
