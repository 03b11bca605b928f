"""Synthetic pressure sources.

Every generator returns a global ``(nx, ny, nz)`` array whose horizontal mean
is zero at every level, so the periodic/Neumann problem is solvable and the
direct and iterative solvers target the same solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import GridSpec, PencilLayout, horizontal_eigenvalue
from ..pencil import DistributedField

GENERATORS = ("single-mode", "random-smooth", "spinup-sequence")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    grid: GridSpec
    generator: str = "random-smooth"
    seed: int = 0
    steps: int = 1
    decay: float = 0.5
    perturbation: float = 1.0
    bands: int = 3

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.decay < 1:
            raise ValueError(f"decay must be in [0, 1), got {self.decay}")


def single_mode(grid: GridSpec) -> np.ndarray:
    """``lambda * cos(2 pi i / nx)``: the discrete Laplacian of the cosine mode."""
    lam = horizontal_eigenvalue(1 % grid.nx, grid.nx, grid.dx)
    i = np.arange(grid.nx)
    mode = np.cos(2.0 * np.pi * i / grid.nx)
    return np.broadcast_to(lam * mode[:, None, None], grid.shape).copy()


def random_smooth(grid: GridSpec, seed: int, bands: int = 3) -> np.ndarray:
    """Sum of low horizontal Fourier modes times low vertical cosine modes."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = grid.shape
    i = np.arange(nx)[:, None, None]
    j = np.arange(ny)[None, :, None]
    k = np.arange(nz)[None, None, :]
    out = np.zeros(grid.shape)
    kxs = range(-min(bands, nx // 2), min(bands, nx // 2) + 1)
    kys = range(-min(bands, ny // 2), min(bands, ny // 2) + 1)
    for kx in kxs:
        for ky in kys:
            if kx % nx == 0 and ky % ny == 0:
                continue
            for m in range(min(bands, nz)):
                amp = rng.standard_normal() / (1.0 + kx * kx + ky * ky + m * m)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                out += amp * np.cos(2 * np.pi * (kx * i / nx + ky * j / ny) + phase) \
                    * np.cos(np.pi * m * (k + 0.5) / nz)
    out -= out.mean(axis=(0, 1), keepdims=True)
    return out


def generate_global(tc: TestCase, step: int = 0) -> np.ndarray:
    if not 0 <= step < tc.steps:
        raise ValueError(f"step {step} outside sequence of {tc.steps} steps")
    if tc.generator == "single-mode":
        return single_mode(tc.grid)
    if tc.generator == "random-smooth":
        return random_smooth(tc.grid, tc.seed, tc.bands)
    steady = random_smooth(tc.grid, tc.seed, tc.bands)
    wobble = random_smooth(tc.grid, tc.seed + 1, tc.bands)
    return steady + tc.perturbation * tc.decay ** step * wobble


def generate_source(tc: TestCase, step: int, layout: PencilLayout, rank: int) -> DistributedField:
    """This rank's block of the step's source."""
    return DistributedField.from_global(layout, rank, generate_global(tc, step))
