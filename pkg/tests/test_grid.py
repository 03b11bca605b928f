import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pencilpoisson.grid import (
    DecompositionError,
    GridSpec,
    PencilLayout,
    ProcessGrid,
    build_process_grid,
    horizontal_eigenvalue,
    horizontal_eigenvalues,
    local_extent,
    split,
)


def test_split_remainder_goes_first():
    assert split(10, 3) == ((0, 4, 7), (4, 3, 3))
    assert split(12, 4) == ((0, 3, 6, 9), (3, 3, 3, 3))
    assert split(1, 1) == ((0,), (1,))


def test_split_over_decomposition():
    with pytest.raises(DecompositionError):
        split(2, 3)
    with pytest.raises(ValueError):
        split(4, 0)


@given(st.integers(1, 200), st.integers(1, 16))
def test_split_tiles_the_range(n, parts):
    if n < parts:
        with pytest.raises(DecompositionError):
            split(n, parts)
        return
    starts, counts = split(n, parts)
    assert sum(counts) == n
    assert max(counts) - min(counts) <= 1
    assert list(counts) == sorted(counts, reverse=True)
    assert [s + c for s, c in zip(starts, counts)] == list(starts[1:]) + [n]


@pytest.mark.parametrize("n,expected", [(1, (1, 1)), (2, (2, 1)), (4, (2, 2)), (6, (3, 2)),
                                        (7, (7, 1)), (8, (4, 2)), (9, (3, 3)), (12, (4, 3))])
def test_process_grid_is_closest_to_square(n, expected):
    pg = build_process_grid(n)
    assert (pg.px, pg.py) == expected


@given(st.integers(1, 64))
def test_process_grid_properties(n):
    pg = build_process_grid(n)
    assert pg.size == n and pg.px >= pg.py
    # no factor pair is closer to square
    for py in range(pg.py + 1, math.isqrt(n) + 1):
        assert n % py
    for rank in range(n):
        assert pg.rank_of(*pg.coords(rank)) == rank


def test_rank_order_is_row_major_and_periodic():
    pg = ProcessGrid(3, 2)
    assert [pg.coords(r) for r in range(6)] == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]
    assert pg.rank_of(-1, 0) == pg.rank_of(2, 0)
    assert pg.rank_of(0, 2) == 0
    with pytest.raises(ValueError):
        pg.coords(6)


def test_gridspec_validation():
    g = GridSpec(4, 5, 6, 0.5)
    assert g.shape == (4, 5, 6) and g.size == 120 and g.spacing == (0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec(0, 4, 4)
    with pytest.raises(ValueError):
        GridSpec(4, 4, 4, dz=0.0)


@given(
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
    st.sampled_from([1, 2, 3, 4, 6]),
    st.sampled_from("zyx"),
)
def test_pencils_partition_the_grid(shape, nranks, orientation):
    grid = GridSpec(*shape)
    pg = build_process_grid(nranks)
    try:
        layout = PencilLayout(orientation, grid, pg)
    except DecompositionError:
        d0, d1 = {"z": (0, 1), "y": (0, 2), "x": (1, 2)}[orientation]
        assert shape[d0] < pg.px or shape[d1] < pg.py
        return
    owner = np.zeros(shape, dtype=int)
    for rank in range(pg.size):
        owner[layout.global_slices(rank)] += 1
        box = layout.box(rank)
        assert layout.local_shape(rank) == tuple(box[d][1] - box[d][0] for d in layout.axes)
        # the pencil dimension is never split
        pencil_dim = layout.axes[2]
        assert box[pencil_dim] == (0, shape[pencil_dim])
    assert (owner == 1).all()


def test_extract_uses_local_axis_order():
    grid = GridSpec(4, 3, 2)
    data = np.arange(grid.size, dtype=float).reshape(grid.shape)
    pg = build_process_grid(2)
    x = PencilLayout("x", grid, pg)
    block = x.extract(1, data)
    assert block.shape == x.local_shape(1) == (1, 2, 4)
    assert block[0, 1, 3] == data[3, 2, 1]


def test_local_extent_matches_box():
    grid, pg = GridSpec(7, 5, 6), ProcessGrid(3, 2)
    assert local_extent("z", grid, pg, 0) == ((0, 3), (0, 3))
    assert local_extent("y", grid, pg, 5) == ((5, 2), (3, 3))
    assert local_extent("x", grid, pg, 3) == ((2, 2), (3, 3))


@pytest.mark.parametrize("n,delta", [(8, 1.0), (5, 0.3), (12, 2.5)])
def test_horizontal_eigenvalue_is_the_second_difference_symbol(n, delta):
    i = np.arange(n)
    for k in range(n):
        mode = np.cos(2 * np.pi * k * i / n + 0.3)
        lap = (np.roll(mode, 1) - 2 * mode + np.roll(mode, -1)) / delta ** 2
        lam = horizontal_eigenvalue(k, n, delta)
        np.testing.assert_allclose(lap, lam * mode, atol=1e-12)
    np.testing.assert_allclose(horizontal_eigenvalues(n, delta),
                               [horizontal_eigenvalue(k, n, delta) for k in range(n)])
    assert horizontal_eigenvalue(0, n, delta) == 0.0
    with pytest.raises(ValueError):
        horizontal_eigenvalue(n, n, delta)
