import math

import hypothesis.extra.numpy as hnp
import hypothesis.strategies as st
import numpy as np
import pytest
import scipy.constants as const
from hypothesis import given, settings

from modules.Errors import GridMismatchError
from modules.Lattice import (
    M_STAR,
    GridSpec,
    LatticeParams,
    SampledFunction,
    UnitSystem,
    apply_hamiltonian,
    apply_kinetic,
    build_potential,
    export_potential_csv,
    inner_product,
    kinetic_matrix,
    norm,
    potential_value,
    sine_transform,
)


@pytest.mark.parametrize(
    "x, x0, expected",
    [(0.0, 0.0, 2.5), (1.0, 0.0, 3.0), (0.25, 0.25, 2.625)],
)
def test_potential_value(x, x0, expected):
    params = LatticeParams(V0=2.5, F=0.5)
    assert potential_value(x, params, x0) == pytest.approx(expected, abs=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        LatticeParams(V0=0.0, F=0.5)
    with pytest.raises(ValueError):
        LatticeParams(V0=2.5, F=-0.1)
    with pytest.raises(ValueError):
        LatticeParams(V0=2.5, F=0.5, a=-0.2, omega=0.5)
    params = LatticeParams(V0=2.5, F=0.5)
    assert params.omega_B == 0.5
    assert params.m_star == pytest.approx(math.pi ** 2 / 2)


def test_default_grid_layout():
    grid = GridSpec()
    assert grid.points == 64 * 32
    assert grid.dx == pytest.approx(1 / 32)
    assert grid.x[0] == -32.5
    assert grid.sites[0] == -32 and grid.sites[-1] == 31
    well = grid.x[grid.site_slice(0)]
    assert well[0] == pytest.approx(-0.5) and well[-1] < 0.5


def test_wells_sit_on_integer_sites():
    grid = GridSpec(n_sites=8, points_per_site=32)
    potential = build_potential(grid, LatticeParams(2.5, 0.5)).values
    for n in grid.sites:
        well = grid.site_slice(n)
        assert grid.x[well][np.argmin(potential[well])] == pytest.approx(n)
    # the walls sit on potential maxima
    assert potential[0] == pytest.approx(2.5 + 0.5 * grid.x_min)


def test_grid_rejects_offset_box():
    with pytest.raises(ValueError):
        GridSpec(n_sites=16, points_per_site=8, x_min=-7.0)


def test_site_masses_sum_to_norm():
    grid = GridSpec(n_sites=8, points_per_site=8)
    values = np.exp(-grid.x ** 2)
    assert grid.site_masses(values).sum() == pytest.approx(norm(values, grid))


def test_build_potential_rejects_nonfinite_offset():
    with pytest.raises(ValueError):
        build_potential(GridSpec(n_sites=8, points_per_site=8), LatticeParams(2.5, 0.5), float("nan"))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 64), elements=st.floats(-10, 10)))
def test_sine_transform_is_an_involution(values):
    np.testing.assert_allclose(sine_transform(sine_transform(values)), values, atol=1e-9)


def test_kinetic_eigenmode():
    grid = GridSpec(n_sites=8, points_per_site=16)
    params = LatticeParams(2.5, 0.5)
    mode = 3
    state = np.sin(mode * math.pi * (grid.x - grid.x_min) / grid.length)
    expected = (mode * math.pi / grid.length) ** 2 / (2 * M_STAR)
    np.testing.assert_allclose(apply_kinetic(state, grid, params), expected * state, atol=1e-10)


def test_kinetic_matrix_matches_transform():
    grid = GridSpec(n_sites=4, points_per_site=8)
    params = LatticeParams(2.5, 0.5)
    rng = np.random.default_rng(3)
    state = rng.normal(size=grid.points)
    state[0] = 0.0
    dense = kinetic_matrix(grid, params) @ state[1:]
    np.testing.assert_allclose(dense, apply_kinetic(state, grid, params)[1:], atol=1e-9)


def test_hamiltonian_checks_grid():
    grid = GridSpec(n_sites=4, points_per_site=8)
    potential = build_potential(grid, LatticeParams(2.5, 0.5))
    with pytest.raises(GridMismatchError):
        apply_hamiltonian(np.zeros(grid.points + 1), potential, LatticeParams(2.5, 0.5))


def test_hamiltonian_is_hermitian():
    grid = GridSpec(n_sites=4, points_per_site=8)
    params = LatticeParams(2.5, 0.5)
    potential = build_potential(grid, params)
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(2, grid.points)) + 1j * rng.normal(size=(2, grid.points))
    a[0] = b[0] = 0.0
    left = inner_product(a, apply_hamiltonian(b, potential, params), grid)
    right = inner_product(apply_hamiltonian(a, potential, params), b, grid)
    assert left == pytest.approx(right, abs=1e-9)


def test_sampled_function_behaves_like_an_array():
    grid = GridSpec(n_sites=4, points_per_site=8)
    sampled = SampledFunction(grid, np.arange(grid.points, dtype=float))
    assert len(sampled) == grid.points
    assert np.asarray(sampled)[5] == 5.0


def test_units_for_rubidium():
    units = UnitSystem.from_wavelength_and_mass(1064e-9, 86.909)
    assert units.E_R / const.h == pytest.approx(2028, rel=2e-3)
    assert units.scales()["length"] == pytest.approx(532e-9)
    assert units.to_physical("time", units.to_dimensionless("time", 1e-3)) == pytest.approx(1e-3)
    with pytest.raises(ValueError):
        units.to_physical("temperature", 1.0)


def test_export_potential_csv(tmp_path):
    grid = GridSpec(n_sites=4, points_per_site=8)
    path = export_potential_csv(tmp_path / "potential.csv", build_potential(grid, LatticeParams(2.5, 0.5)))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,V"
    assert len(lines) == grid.points + 1
