"""Matrix-free Krylov solvers for the 7-point pressure Laplacian.

Fields live in z-pencils with a one-cell ghost ring in x and y. The operator
is periodic in x/y (through the halo) and Neumann in z (ghost reflection
applied inside the stencil). Both solvers use the column block of the
operator as a conditioner, fuse dependency-free inner products into single
reductions and can overlap the halo swap with the interior stencil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .comm import MessageDescriptor
from .grid import GridSpec, PencilLayout, ProcessGrid
from .pencil import DistributedField
from .spectral import thomas_apply, thomas_factor

BREAKDOWN_RTOL = 1e-14
POSTCOND_EPS = 1e-12

# tag = direction the face travels
_EAST, _WEST, _NORTH, _SOUTH = 201, 202, 203, 204


class SolverBreakdown(ArithmeticError):
    pass


class HaloGeometry:
    """Neighbours, face buffers and counters shared by all halo fields of one rank."""

    def __init__(self, grid: GridSpec, pgrid: ProcessGrid, comm):
        if pgrid.size != comm.size:
            raise ValueError(f"process grid has {pgrid.size} ranks, communicator {comm.size}")
        self.grid = grid
        self.pgrid = pgrid
        self.comm = comm
        self.rank = comm.rank
        self.layout = PencilLayout("z", grid, pgrid)
        self.shape = self.layout.local_shape(self.rank)
        cx, cy, nz = self.shape
        ix, iy = pgrid.coords(self.rank)
        self.east = pgrid.rank_of(ix + 1, iy)
        self.west = pgrid.rank_of(ix - 1, iy)
        self.north = pgrid.rank_of(ix, iy + 1)
        self.south = pgrid.rank_of(ix, iy - 1)
        self.x_remote = pgrid.px > 1
        self.y_remote = pgrid.py > 1
        self.swaps = 0

    def field(self, values=None) -> "HaloField":
        cx, cy, nz = self.shape
        f = HaloField(self, np.zeros((cx + 2, cy + 2, nz)))
        if values is not None:
            f.interior[...] = values
        return f

    def from_global(self, global_array) -> "HaloField":
        return self.field(self.layout.extract(self.rank, np.asarray(global_array, dtype=float)))


@dataclass
class HaloField:
    geometry: HaloGeometry
    data: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return self.data[1:-1, 1:-1, :]

    def to_distributed(self) -> DistributedField:
        return DistributedField(self.geometry.layout, self.geometry.rank, self.interior.copy())


class HaloExchange:
    """In-flight halo swap; :meth:`finish` waits until the ghosts are written."""

    def __init__(self, field: HaloField, pending):
        self.field = field
        self.pending = pending

    def finish(self):
        if self.pending is not None:
            self.pending.finish()
        return self.field


def halo_swap(field: HaloField, comm=None, mode: str = "blocking"):
    """Fill the four face ghost layers from the periodic neighbours.

    Faces travel straight from and into views of the field, so a swap needs
    no pack buffers.

    ``mode="split"`` returns a :class:`HaloExchange` whose ``finish()`` must be
    called before the ghosts are read; ``"blocking"`` returns the field.
    """
    if mode not in ("blocking", "split"):
        raise ValueError(f"unknown halo swap mode {mode!r}")
    g, d = field.geometry, field.data
    comm = comm or g.comm
    g.swaps += 1
    sends, recvs = [], []
    if g.x_remote:
        sends += [MessageDescriptor(g.east, _EAST, d[-2, 1:-1, :]),
                  MessageDescriptor(g.west, _WEST, d[1, 1:-1, :])]
        recvs += [MessageDescriptor(g.west, _EAST, d[0, 1:-1, :]),
                  MessageDescriptor(g.east, _WEST, d[-1, 1:-1, :])]
    else:
        d[0, 1:-1, :] = d[-2, 1:-1, :]
        d[-1, 1:-1, :] = d[1, 1:-1, :]
    if g.y_remote:
        sends += [MessageDescriptor(g.north, _NORTH, d[1:-1, -2, :]),
                  MessageDescriptor(g.south, _SOUTH, d[1:-1, 1, :])]
        recvs += [MessageDescriptor(g.south, _NORTH, d[1:-1, 0, :]),
                  MessageDescriptor(g.north, _SOUTH, d[1:-1, -1, :])]
    else:
        d[1:-1, 0, :] = d[1:-1, -2, :]
        d[1:-1, -1, :] = d[1:-1, 1, :]
    pending = comm.exchange_start(sends, recvs) if sends else None
    exchange = HaloExchange(field, pending)
    if mode == "split":
        return exchange
    return exchange.finish()


def _stencil(src: np.ndarray, dst: np.ndarray, xs: slice, ys: slice, inv2):
    """Laplacian of the cells ``src[xs, ys, :]`` (halo coordinates) into ``dst``.

    ``dst`` has the interior shape, so it is indexed one cell lower.
    """
    idx2, idy2, idz2 = inv2
    x0, x1 = xs.start, xs.stop
    y0, y1 = ys.start, ys.stop
    c = src[x0:x1, y0:y1, :]
    horiz_x = (src[x0 + 1:x1 + 1, y0:y1, :] + src[x0 - 1:x1 - 1, y0:y1, :] - 2.0 * c) * idx2
    horiz_y = (src[x0:x1, y0 + 1:y1 + 1, :] + src[x0:x1, y0 - 1:y1 - 1, :] - 2.0 * c) * idy2
    vert = -2.0 * c
    vert[..., 1:] += c[..., :-1]
    vert[..., :-1] += c[..., 1:]
    vert[..., 0] += c[..., 0]
    vert[..., -1] += c[..., -1]
    dst[x0 - 1:x1 - 1, y0 - 1:y1 - 1, :] = horiz_x + horiz_y + vert * idz2


def apply_laplacian(field: HaloField, out, comm=None, overlap: bool = False):
    """``out = laplacian(field)`` on the interior, swapping halos first.

    ``out`` is a :class:`HaloField` (its interior is written) or a plain
    array of the interior shape.

    With ``overlap`` the cells that do not read ghosts are computed while the
    swap is in flight; the result is bitwise identical to the blocking path.
    """
    g = field.geometry
    inv2 = (1.0 / g.grid.dx ** 2, 1.0 / g.grid.dy ** 2, 1.0 / g.grid.dz ** 2)
    cx, cy, _ = g.shape
    src = field.data
    dst = out.interior if isinstance(out, HaloField) else out
    if not overlap:
        halo_swap(field, comm, "blocking")
        _stencil(src, dst, slice(1, cx + 1), slice(1, cy + 1), inv2)
        return out
    exchange = halo_swap(field, comm, "split")
    if cx > 2 and cy > 2:
        _stencil(src, dst, slice(2, cx), slice(2, cy), inv2)
    exchange.finish()
    # boundary shell: first/last x rows, then first/last y columns in between
    rows = [1] if cx == 1 else [1, cx]
    for i in rows:
        _stencil(src, dst, slice(i, i + 1), slice(1, cy + 1), inv2)
    if cx > 2:
        cols = [1] if cy == 1 else [1, cy]
        for j in cols:
            _stencil(src, dst, slice(2, cx), slice(j, j + 1), inv2)
    return out


class Postconditioner:
    """Inverse of the operator's column block, applied line by line in z.

    The block is the Neumann second difference in z plus the diagonal part of
    the horizontal stencil. It is singular only when both horizontal extents
    are 1, in which case the diagonal is shifted by ``-POSTCOND_EPS``.
    """

    def __init__(self, grid: GridSpec):
        nz = grid.nz
        inv = 1.0 / grid.dz ** 2
        shift = 0.0
        if grid.nx > 1:
            shift -= 2.0 / grid.dx ** 2
        if grid.ny > 1:
            shift -= 2.0 / grid.dy ** 2
        if shift == 0.0:
            shift = -POSTCOND_EPS
        self.sub = np.full(nz - 1, inv)
        self.diag = np.full(nz, -2.0 * inv + shift)
        self.diag[0] += inv
        self.diag[-1] += inv
        self.sup = np.full(nz - 1, inv)
        self.factors = thomas_factor(self.sub, self.diag, self.sup)

    @property
    def nbytes(self) -> int:
        return self.factors[0].nbytes + self.factors[1].nbytes + self.sub.nbytes

    def column_operator(self, values: np.ndarray) -> np.ndarray:
        """Apply the column block itself (the inverse of :meth:`__call__`)."""
        out = values * self.diag
        out[..., 1:] += self.sub * values[..., :-1]
        out[..., :-1] += self.sup * values[..., 1:]
        return out

    def __call__(self, values: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        return thomas_apply(self.factors, self.sub, values, out=out)


def apply_postconditioner(field: HaloField, out: HaloField | None = None) -> HaloField:
    pc = Postconditioner(field.geometry.grid)
    out = out or field.geometry.field()
    pc(field.interior, out=out.interior)
    return out


def fused_dot(comm, pairs) -> np.ndarray:
    """Global inner products of every ``(u, v)`` pair in a single reduction."""
    local = [float(np.vdot(u, v)) for u, v in pairs]
    return comm.allreduce_sum(local)


@dataclass
class SolverOptions:
    method: str = "cg"
    tol: float = 1e-6
    max_iter: int = 1000
    postcondition: bool = True
    overlap: bool = True
    warm_start: bool = False
    fuse_reductions: bool = True

    def __post_init__(self):
        if self.method not in ("cg", "bicgstab"):
            raise ValueError(f"unknown method {self.method!r}")
        if not 0 < self.tol < 1:
            raise ValueError(f"tolerance must be in (0, 1), got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class SolveReport:
    method: str
    converged: bool = False
    iterations: int = 0
    relative_residual: float = 0.0
    true_relative_residual: float = 0.0
    seconds: float = 0.0
    operator_applications: int = 0
    halo_swaps: int = 0
    reductions: int = 0
    messages: int = 0
    bytes: int = 0
    peak_bytes: int = 0
    loop_reductions: int = 0
    residual_history: list = field(default_factory=list)


class KrylovSolver:
    """Workspace and conditioner for repeated solves on one rank.

    Only vectors the operator is applied to carry a halo. CG keeps four
    vectors (the conditioned residual shares storage with ``A p``); BiCGStab
    keeps seven (``s`` overwrites ``r``, the two conditioned directions share
    one halo field).
    """

    def __init__(self, grid: GridSpec, pgrid: ProcessGrid, comm, opts: SolverOptions | None = None):
        self.opts = opts or SolverOptions()
        self.geometry = HaloGeometry(grid, pgrid, comm)
        self.comm = comm
        self.postcond = Postconditioner(grid)
        g = self.geometry
        shape = g.shape
        if self.opts.method == "cg":
            self.halo = {"p": g.field()}
            self.vec = {n: np.zeros(shape) for n in ("x", "r", "q")}
        else:
            self.halo = {"hat": g.field()}
            self.vec = {n: np.zeros(shape) for n in ("x", "r", "rhat", "p", "v", "t")}
        self._scratch = self.halo.get("p") or self.halo["hat"]
        self.applications = 0

    @property
    def buffer_bytes(self) -> int:
        arrays = [f.data for f in self.halo.values()] + list(self.vec.values())
        return self.postcond.nbytes + sum(a.nbytes for a in arrays)

    def _apply(self, src: HaloField, out: np.ndarray) -> np.ndarray:
        self.applications += 1
        apply_laplacian(src, out, self.comm, overlap=self.opts.overlap)
        return out

    def _condition(self, src: np.ndarray, dst: np.ndarray):
        if self.opts.postcondition:
            self.postcond(src, out=dst)
        else:
            np.copyto(dst, src)

    def solve(self, b: HaloField, x0: HaloField | None = None):
        t0 = time.perf_counter()
        stats0 = self.comm.stats.snapshot()
        swaps0, apps0 = self.geometry.swaps, self.applications
        report = SolveReport(self.opts.method)

        npts = self.geometry.grid.size
        total = self.comm.allreduce_sum([b.interior.sum()])[0]
        rhs = b.interior - total / npts
        x = self.vec["x"]
        if self.opts.warm_start and x0 is not None:
            np.copyto(x, x0.interior)
        else:
            x[...] = 0.0

        self._loop_reductions = 0
        if self.opts.method == "cg":
            self._cg(rhs, report)
        else:
            self._bicgstab(rhs, report)
        report.loop_reductions = self._loop_reductions

        # gauge: mean-free solution, then the true residual for the report
        mean, = self.comm.allreduce_sum([x.sum()]) / npts
        x -= mean
        tmp = self._scratch
        np.copyto(tmp.interior, x)
        # q (CG) or t (BiCGStab) is free once the iteration is over
        residual = self._apply(tmp, self.vec["q" if self.opts.method == "cg" else "t"])
        np.subtract(rhs, residual, out=residual)
        bb, rr = fused_dot(self.comm, [(rhs, rhs), (residual, residual)])
        report.true_relative_residual = float(np.sqrt(rr / bb)) if bb > 0 else 0.0

        stats = self.comm.stats.since(stats0)
        report.reductions = stats.reductions
        report.messages = stats.messages
        report.bytes = stats.bytes
        report.halo_swaps = self.geometry.swaps - swaps0
        report.operator_applications = self.applications - apps0
        report.peak_bytes = self.buffer_bytes
        report.seconds = time.perf_counter() - t0
        return self.geometry.field(x), report

    def _reduce(self, values):
        self._loop_reductions += 1
        return self.comm.allreduce_sum(values)

    def _finish(self, report, rel, converged):
        report.relative_residual = float(rel)
        report.converged = bool(converged)

    def _cg(self, rhs: np.ndarray, report: SolveReport):
        # conjugate gradients on the positive operator -A
        comm, opts = self.comm, self.opts
        x, r, q = self.vec["x"], self.vec["r"], self.vec["q"]
        p = self.halo["p"]
        pi = p.interior
        z = q  # conditioned residual lives where A p was
        npts = self.geometry.grid.size

        bnorm2, = fused_dot(comm, [(rhs, rhs)])
        if bnorm2 == 0.0:
            x[...] = 0.0
            return self._finish(report, 0.0, True)
        ref = np.sqrt(bnorm2)
        if opts.warm_start and np.any(x):
            np.copyto(pi, x)
            np.subtract(self._apply(p, r), rhs, out=r)  # -b - (-A x)
        else:
            np.negative(rhs, out=r)

        def precondition():
            # z = (-B)^-1 r; its mean is removed after the next reduction
            self._condition(r, z)
            if opts.postcondition:
                np.negative(z, out=z)

        precondition()
        rz, rr, zsum = comm.allreduce_sum([np.vdot(r, z), np.vdot(r, r), z.sum()])
        z -= zsum / npts
        rel = np.sqrt(rr) / ref
        report.residual_history.append(float(rel))
        if rel <= opts.tol:
            return self._finish(report, rel, True)
        np.copyto(pi, z)

        for it in range(1, opts.max_iter + 1):
            report.iterations = it
            np.negative(self._apply(p, q), out=q)
            if opts.fuse_reductions:
                pq, pp = self._reduce([np.vdot(pi, q), np.vdot(pi, pi)])
            else:
                pq, = self._reduce([np.vdot(pi, q)])
                pp, = self._reduce([np.vdot(pi, pi)])
            if pq <= BREAKDOWN_RTOL * pp:
                raise SolverBreakdown(f"CG breakdown at iteration {it}: <p, Ap> = {pq}")
            alpha = rz / pq
            x += alpha * pi
            r -= alpha * q
            precondition()
            if opts.fuse_reductions:
                rz_new, rr, zsum = self._reduce([np.vdot(r, z), np.vdot(r, r), z.sum()])
            else:
                rz_new, zsum = self._reduce([np.vdot(r, z), z.sum()])
                rr, = self._reduce([np.vdot(r, r)])
            z -= zsum / npts
            rel = np.sqrt(rr) / ref
            report.residual_history.append(float(rel))
            if rel <= opts.tol:
                return self._finish(report, rel, True)
            pi *= rz_new / rz
            pi += z
            rz = rz_new
        self._finish(report, rel, False)

    def _bicgstab(self, rhs: np.ndarray, report: SolveReport):
        # right conditioned: solve A M y = b, x = M y
        comm, opts = self.comm, self.opts
        x, r, rh, p, v, t = (self.vec[k] for k in ("x", "r", "rhat", "p", "v", "t"))
        hat = self.halo["hat"]
        hi = hat.interior
        s = r  # s = r - alpha v is formed in place

        bnorm2, = fused_dot(comm, [(rhs, rhs)])
        if bnorm2 == 0.0:
            x[...] = 0.0
            return self._finish(report, 0.0, True)
        ref = np.sqrt(bnorm2)
        if opts.warm_start and np.any(x):
            np.copyto(hi, x)
            np.subtract(rhs, self._apply(hat, r), out=r)
            rr, = fused_dot(comm, [(r, r)])
        else:
            np.copyto(r, rhs)
            rr = bnorm2
        rel = np.sqrt(rr) / ref
        report.residual_history.append(float(rel))
        if rel <= opts.tol:
            return self._finish(report, rel, True)

        np.copyto(rh, r)
        np.copyto(p, r)
        rho = rr
        for it in range(1, opts.max_iter + 1):
            report.iterations = it
            self._condition(p, hi)
            self._apply(hat, v)
            rv, = self._reduce([np.vdot(rh, v)])
            if abs(rv) <= BREAKDOWN_RTOL * abs(rho):
                raise SolverBreakdown(f"BiCGStab breakdown at iteration {it}: <rhat, v> = {rv}")
            alpha = rho / rv
            x += alpha * hi
            s -= alpha * v
            self._condition(s, hi)
            self._apply(hat, t)
            if opts.fuse_reductions:
                ts, tt, ss, rs, rt = self._reduce(
                    [np.vdot(t, s), np.vdot(t, t), np.vdot(s, s), np.vdot(rh, s), np.vdot(rh, t)])
            else:
                ts, tt, ss = self._reduce([np.vdot(t, s), np.vdot(t, t), np.vdot(s, s)])
            if np.sqrt(ss) / ref <= opts.tol:
                rel = np.sqrt(ss) / ref
                report.residual_history.append(float(rel))
                return self._finish(report, rel, True)
            if tt == 0.0:
                raise SolverBreakdown(f"BiCGStab breakdown at iteration {it}: t = 0")
            omega = ts / tt
            x += omega * hi
            r -= omega * t
            if opts.fuse_reductions:
                rr = max(ss - 2.0 * omega * ts + omega * omega * tt, 0.0)
                rho_new = rs - omega * rt
            else:
                rho_new, rr = self._reduce([np.vdot(rh, r), np.vdot(r, r)])
            rel = np.sqrt(rr) / ref
            report.residual_history.append(float(rel))
            if rel <= opts.tol:
                return self._finish(report, rel, True)
            if omega == 0.0 or abs(rho_new) <= BREAKDOWN_RTOL * rr:
                raise SolverBreakdown(f"BiCGStab breakdown at iteration {it}: omega={omega}, rho={rho_new}")
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p -= omega * v
            p *= beta
            p += r
        self._finish(report, rel, False)


def _solve(method, b, x0, opts, comm):
    opts = opts or SolverOptions(method=method)
    if opts.method != method:
        opts = SolverOptions(**{**vars(opts), "method": method})
    g = b.geometry
    solver = KrylovSolver(g.grid, g.pgrid, comm or g.comm, opts)
    return solver.solve(b, x0)


def cg_solve(b: HaloField, x0: HaloField | None = None, opts: SolverOptions | None = None, comm=None):
    """Conditioned conjugate gradients; returns ``(x, SolveReport)``."""
    return _solve("cg", b, x0, opts, comm)


def bicgstab_solve(b: HaloField, x0: HaloField | None = None, opts: SolverOptions | None = None, comm=None):
    """Right-conditioned BiCGStab; returns ``(x, SolveReport)``."""
    return _solve("bicgstab", b, x0, opts, comm)
