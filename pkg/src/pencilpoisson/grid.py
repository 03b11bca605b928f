"""Global grid geometry, process-grid factorization and pencil extents.

Three pencil orientations are supported. The orientation names the dimension
held entirely on each rank; the other two are split over the 2D process grid:

=========== =================== ========================
orientation local array axes    split (over px, over py)
=========== =================== ========================
``"z"``     (x, y, z)           (x, y)
``"y"``     (x, z, y)           (x, z)
``"x"``     (y, z, x)           (y, z)
=========== =================== ========================

The last axis of every local block is the locally complete dimension, so it is
the fastest varying one in C order.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np

ORIENTATIONS = ("z", "y", "x")

# global dimension index (0=x, 1=y, 2=z) of each local array axis
AXES = {
    "z": (0, 1, 2),
    "y": (0, 2, 1),
    "x": (1, 2, 0),
}


class DecompositionError(ValueError):
    """Raised when a dimension cannot be split over the requested ranks."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz


@dataclass(frozen=True)
class ProcessGrid:
    px: int
    py: int

    @property
    def size(self) -> int:
        return self.px * self.py

    def coords(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} outside process grid of size {self.size}")
        return divmod(rank, self.py)

    def rank_of(self, ix: int, iy: int) -> int:
        return (ix % self.px) * self.py + (iy % self.py)

    @property
    def rank_coords(self) -> dict[int, tuple[int, int]]:
        return {r: self.coords(r) for r in range(self.size)}


def build_process_grid(nranks: int) -> ProcessGrid:
    """Closest-to-square factorization ``px * py == nranks`` with ``px >= py``."""
    if nranks < 1:
        raise ValueError(f"nranks must be >= 1, got {nranks}")
    py = math.isqrt(nranks)
    while nranks % py:
        py -= 1
    return ProcessGrid(nranks // py, py)


@lru_cache(maxsize=4096)
def split(n: int, parts: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Remainder-first split of ``n`` points into ``parts`` contiguous chunks.

    The first ``n % parts`` chunks get one extra point. Returns ``(starts, counts)``.
    """
    if parts < 1:
        raise ValueError(f"parts must be >= 1, got {parts}")
    if n < parts:
        raise DecompositionError(
            f"over-decomposition: {n} points cannot be split over {parts} ranks"
        )
    base, extra = divmod(n, parts)
    counts = tuple(base + 1 if i < extra else base for i in range(parts))
    starts = tuple(i * base + min(i, extra) for i in range(parts))
    return starts, counts


@dataclass(frozen=True)
class PencilLayout:
    """Extents of every rank's block for one pencil orientation."""

    orientation: str
    grid: GridSpec
    pgrid: ProcessGrid

    def __post_init__(self):
        if self.orientation not in AXES:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        # fail early on over-decomposition
        for dim, parts in zip(self.split_dims, (self.pgrid.px, self.pgrid.py)):
            split(self.grid.shape[dim], parts)

    @property
    def axes(self) -> tuple[int, int, int]:
        return AXES[self.orientation]

    @property
    def split_dims(self) -> tuple[int, int]:
        a = self.axes
        return (a[0], a[1])

    def box(self, rank: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        """Global ``(start, stop)`` ranges owned by ``rank``, indexed by x, y, z."""
        ix, iy = self.pgrid.coords(rank)
        ranges = [(0, n) for n in self.grid.shape]
        for dim, parts, idx in zip(self.split_dims, (self.pgrid.px, self.pgrid.py), (ix, iy)):
            starts, counts = split(self.grid.shape[dim], parts)
            ranges[dim] = (starts[idx], starts[idx] + counts[idx])
        return tuple(ranges)

    def local_shape(self, rank: int) -> tuple[int, int, int]:
        box = self.box(rank)
        return tuple(box[d][1] - box[d][0] for d in self.axes)

    def local_size(self, rank: int) -> int:
        return math.prod(self.local_shape(rank))

    def global_slices(self, rank: int) -> tuple[slice, slice, slice]:
        """Slices selecting this rank's block from a global ``(nx, ny, nz)`` array."""
        return tuple(slice(a, b) for a, b in self.box(rank))

    def extract(self, rank: int, global_array: np.ndarray) -> np.ndarray:
        """Copy of ``rank``'s block taken from a global array, in local axis order."""
        block = global_array[self.global_slices(rank)]
        return np.ascontiguousarray(block.transpose(self.axes))


def local_extent(orientation: str, grid: GridSpec, pgrid: ProcessGrid, rank: int):
    """Starts and counts of ``rank``'s block in the two split dimensions.

    Returns ``((start0, count0), (start1, count1))`` ordered as the layout's
    split dimensions.
    """
    layout = PencilLayout(orientation, grid, pgrid)
    box = layout.box(rank)
    return tuple((box[d][0], box[d][1] - box[d][0]) for d in layout.split_dims)


def horizontal_eigenvalue(k: int, n: int, delta: float) -> float:
    """Symbol of the periodic second difference ``(f[i-1] - 2 f[i] + f[i+1]) / delta**2``."""
    if not 0 <= k < n:
        raise ValueError(f"mode {k} outside [0, {n})")
    return (2.0 * math.cos(2.0 * math.pi * k / n) - 2.0) / (delta * delta)


def horizontal_eigenvalues(n: int, delta: float) -> np.ndarray:
    """All ``n`` eigenvalues at once, same formula as :func:`horizontal_eigenvalue`."""
    k = np.arange(n)
    return (2.0 * np.cos(2.0 * np.pi * k / n) - 2.0) / (delta * delta)
