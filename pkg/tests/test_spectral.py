import numpy as np
import pytest
from hypothesis import given, strategies as st

from pencilpoisson.bench.oracle import assemble_laplacian, dense_oracle_solve
from pencilpoisson.comm import SPMDError, run_spmd
from pencilpoisson.grid import GridSpec, build_process_grid, horizontal_eigenvalue
from pencilpoisson.krylov import HaloGeometry, apply_laplacian
from pencilpoisson.pencil import DistributedField, assemble
from pencilpoisson.spectral import (
    FFTPlan,
    SingularSystemError,
    SpectralPlan,
    TridiagonalSystem,
    build_vertical_system,
    dft_forward,
    dft_inverse,
    naive_dft,
    thomas_apply,
    thomas_factor,
    thomas_solve,
    vertical_coefficients,
)


def test_constant_maps_to_zero_mode():
    np.testing.assert_allclose(dft_forward([2.5] * 4), [10, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("n", [2, 3, 5, 7, 8, 11, 12, 13, 16, 30, 49, 60])
def test_forward_matches_naive_summation(n):
    x = np.random.default_rng(n).standard_normal(n)
    ref = naive_dft(x)
    assert np.abs(dft_forward(x) - ref).max() <= 1e-12 * np.abs(ref).max()


@given(st.integers(1, 64), st.integers(0, 2**31))
def test_inverse_round_trip(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    assert np.abs(dft_inverse(dft_forward(x)) - x).max() < 1e-12


@given(st.integers(1, 40), st.integers(0, 2**31))
def test_conjugate_symmetry_of_real_input(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    f = dft_forward(x)
    np.testing.assert_allclose(f[1:], np.conj(f[1:][::-1]), atol=1e-12 * max(1.0, np.abs(f).max()))


def test_naive_dft_against_numpy():
    # the oracle itself is checked against an independent implementation
    x = np.random.default_rng(1).standard_normal(9) + 1j
    np.testing.assert_allclose(naive_dft(x), np.fft.fft(x), atol=1e-12)


def test_batched_plan_matches_per_line():
    plan = FFTPlan(12)
    lines = np.random.default_rng(2).standard_normal((3, 4, 12))
    batched = plan.forward(lines)
    for idx in np.ndindex(3, 4):
        np.testing.assert_allclose(batched[idx], naive_dft(lines[idx]), atol=1e-12)
    np.testing.assert_allclose(plan.inverse(batched).real, lines, atol=1e-13)


def test_thomas_examples():
    assert thomas_solve(TridiagonalSystem([], [2.0], [], [6.0])) == pytest.approx([3.0])
    x = thomas_solve(TridiagonalSystem([-1, -1], [2, 2, 2], [-1, -1], [1, 0, 1]))
    np.testing.assert_allclose(x, [1, 1, 1], atol=1e-15)


@given(st.integers(1, 24), st.integers(0, 2**31))
def test_thomas_matches_dense_elimination(n, seed):
    rng = np.random.default_rng(seed)
    a, c = rng.standard_normal(n - 1), rng.standard_normal(n - 1)
    b = np.abs(rng.standard_normal(n)) + 2.0 + np.r_[0, np.abs(a)] + np.r_[np.abs(c), 0]
    d = rng.standard_normal(n)
    system = TridiagonalSystem(a, b, c, d)
    ref = np.linalg.solve(system.dense(), d)
    x = thomas_solve(system)
    assert np.abs(x - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
    np.testing.assert_allclose(thomas_apply(thomas_factor(a, b, c), a, d), x, rtol=1e-13, atol=1e-15)


def test_thomas_singular_pivot():
    with pytest.raises(SingularSystemError):
        thomas_solve(TridiagonalSystem([1.0], [1.0, 1.0], [1.0], [0.0, 0.0]))
    with pytest.raises(SingularSystemError):
        thomas_factor([1.0], np.array([[1.0, 1.0]]), [1.0])


def test_factored_solve_in_place_batched_complex():
    a, b, c = vertical_coefficients(np.array([-1.0, -3.0]), 6, 0.5)
    d = np.random.default_rng(3).standard_normal((2, 6)) + 1j
    expected = np.stack([np.linalg.solve(TridiagonalSystem(a, b[i], c[i], d[i].real).dense(), d[i])
                         for i in range(2)])
    thomas_apply(thomas_factor(a, b, c), a, d, out=d)
    np.testing.assert_allclose(d, expected, atol=1e-12)


def test_vertical_system_examples():
    grid = GridSpec(4, 4, 1)
    re, im = build_vertical_system(-4.0, grid, [-4.0])
    assert re.b.tolist() == [-4.0]
    assert thomas_solve(re) == pytest.approx([1.0]) and thomas_solve(im) == pytest.approx([0.0])

    re, im = build_vertical_system(0.0, GridSpec(2, 2, 5), np.zeros(5))
    assert (thomas_solve(re) == 0).all() and (thomas_solve(im) == 0).all()
    with pytest.raises(ValueError):
        build_vertical_system(1.0, grid, [0.0])


@pytest.mark.parametrize("kx,ky", [(1, 0), (2, 3), (0, 1)])
def test_vertical_system_is_the_projected_dense_operator(kx, ky):
    grid = GridSpec(4, 5, 8, 0.7, 1.3, 0.4)
    lap = assemble_laplacian(grid)
    lam = horizontal_eigenvalue(kx, 4, 0.7) + horizontal_eigenvalue(ky, 5, 1.3)
    re, _ = build_vertical_system(lam, grid, np.zeros(8))
    # apply the dense operator to mode(i,j) * e_k and read off the column coupling
    i, j = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    mode = np.exp(2j * np.pi * (kx * i / 4 + ky * j / 5))
    for k in range(8):
        v = np.zeros(grid.shape, dtype=complex)
        v[:, :, k] = mode
        col = (lap @ v.ravel()).reshape(grid.shape) / mode[:, :, None]
        np.testing.assert_allclose(col.real, np.broadcast_to(re.dense()[:, k], col.shape), atol=1e-10)
        np.testing.assert_allclose(col.imag, 0.0, atol=1e-10)


def _spectral(grid, nworkers, source, tridiagonal=True):
    pg = build_process_grid(nworkers)

    def program(rank, comm):
        plan = SpectralPlan(grid, pg, comm)
        src = DistributedField.from_global(plan.z_layout, rank, source)
        out = plan.solve(src, tridiagonal=tridiagonal)
        return out, plan.last_imag_residue

    results = run_spmd(nworkers, program)
    return assemble([r[0] for r in results]), max(r[1] for r in results)


def _laplacian(grid, p):
    def program(rank, comm):
        g = HaloGeometry(grid, build_process_grid(1), comm)
        out = g.field()
        apply_laplacian(g.from_global(p), out)
        return out.interior.copy()
    return run_spmd(1, program)[0]


@pytest.mark.parametrize("nworkers", [1, 2, 4, 6])
@pytest.mark.parametrize("shape", [(6, 6, 6), (7, 5, 4), (12, 8, 3)])
def test_transform_round_trip(shape, nworkers):
    data = np.random.default_rng(5).standard_normal(shape)
    out, residue = _spectral(GridSpec(*shape), nworkers, data, tridiagonal=False)
    assert np.abs(out - data).max() < 1e-12
    assert residue < 1e-10


def test_zero_source():
    out, _ = _spectral(GridSpec(4, 4, 4), 4, np.zeros((4, 4, 4)))
    assert (out == 0).all()


@pytest.mark.parametrize("nx,dx", [(8, 1.0), (6, 0.3), (9, 2.0)])
def test_single_mode_is_an_eigenfunction(nx, dx):
    grid = GridSpec(nx, 4, 5, dx)
    lam = horizontal_eigenvalue(1, nx, dx)
    m = np.broadcast_to(np.cos(2 * np.pi * np.arange(nx) / nx)[:, None, None], grid.shape)
    out, _ = _spectral(grid, 2, lam * m)
    err = (out - m) - (out - m).mean()
    assert np.abs(err).max() < 1e-10


@given(st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(1, 6)),
       st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_discrete_consistency(shape, nworkers, seed):
    grid = GridSpec(*shape, 0.8, 1.1, 0.6)
    if shape[0] < build_process_grid(nworkers).px or min(shape[1], shape[2]) < build_process_grid(nworkers).py:
        return
    b = np.random.default_rng(seed).standard_normal(shape)
    p, _ = _spectral(grid, nworkers, b)
    expected = b - b.mean(axis=(0, 1), keepdims=True)
    assert np.abs(_laplacian(grid, p) - expected).max() < 1e-10
    assert np.abs(p.mean(axis=(0, 1))).max() < 1e-12


def test_matches_dense_oracle_and_worker_count():
    grid = GridSpec(6, 6, 6)
    b = np.random.default_rng(6).standard_normal(grid.shape)
    b -= b.mean(axis=(0, 1), keepdims=True)
    ref = dense_oracle_solve(grid, b)
    one, _ = _spectral(grid, 1, b)
    four, _ = _spectral(grid, 4, b)
    assert np.abs((one - one.mean()) - (ref - ref.mean())).max() < 1e-9
    assert np.abs(one - four).max() < 1e-12


def test_plan_is_reused_without_new_work_buffers():
    grid, pg = GridSpec(6, 5, 4), build_process_grid(2)
    data = np.random.default_rng(7).standard_normal(grid.shape)

    def program(rank, comm):
        plan = SpectralPlan(grid, pg, comm)
        src = DistributedField.from_global(plan.z_layout, rank, data)
        buffers = [id(w.values) for w in (plan.y_real, plan.y_work, plan.x_work, plan.z_work)]
        size = plan.buffer_bytes
        out = DistributedField.zeros(plan.z_layout, rank)
        first = plan.solve(src, out=out).values.copy()
        second = plan.solve(src, out=out)
        same = [id(w.values) for w in (plan.y_real, plan.y_work, plan.x_work, plan.z_work)] == buffers
        return second is out and same and size == plan.buffer_bytes and np.array_equal(first, out.values)

    assert all(run_spmd(2, program))


def test_rejects_complex_and_wrong_layout():
    grid, pg = GridSpec(4, 4, 4), build_process_grid(1)

    def complex_source(rank, comm):
        plan = SpectralPlan(grid, pg, comm)
        plan.solve(DistributedField.zeros(plan.z_layout, rank, complex))

    with pytest.raises(SPMDError) as info:
        run_spmd(1, complex_source)
    assert isinstance(info.value.error, TypeError)

    def wrong_layout(rank, comm):
        plan = SpectralPlan(grid, pg, comm)
        plan.solve(DistributedField.zeros(plan.y_layout, rank))

    with pytest.raises(SPMDError):
        run_spmd(1, wrong_layout)
