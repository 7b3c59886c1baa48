import json
from dataclasses import replace

import numpy as np
import pytest

from modules.Basis import (
    CouplingTable,
    build_basis,
    export_couplings_json,
    export_energies_csv,
    export_states_csv,
    extract_wss_ladder,
    fix_phase,
    solve_eigenproblem,
)
from modules.Errors import DegenerateLobeError
from modules.Lattice import GridSpec, LatticeParams


def test_spectrum_is_sorted_and_accurate(spectrum):
    assert np.all(np.diff(spectrum.energies) >= 0)
    assert spectrum.max_residual <= 1e-8
    energy, state = next(iter(spectrum))
    assert energy == spectrum.energies[0]
    assert np.sum(state ** 2) * spectrum.grid.dx == pytest.approx(1.0, abs=1e-10)


def test_one_ladder_state_per_well(basis, grid):
    assert len(basis.sites) == grid.n_sites
    np.testing.assert_array_equal(basis.sites, grid.sites)
    assert basis.discarded > 0


def test_ladder_spacing_is_the_bloch_frequency(basis, params):
    bulk = basis.energies[basis.bulk_slice()]
    np.testing.assert_allclose(np.diff(bulk), params.omega_B, atol=1e-3 * params.omega_B)
    assert basis.ladder_error <= 1e-3 * params.omega_B
    assert basis.translation_error <= 1e-3


def test_bulk_excludes_the_walls(basis):
    lo, hi = basis.bulk_range
    assert lo >= -24 and hi <= 23
    assert hi - lo >= 20
    assert not basis.in_bulk(-32) and basis.in_bulk(0)


def test_states_are_localized(basis):
    masses = basis.well_masses()
    for n in basis.bulk_sites:
        i = basis.index_of(n)
        assert masses[i, i - 1 : i + 2].sum() >= 0.9


def test_states_are_orthonormal(basis, grid):
    overlap = basis.states @ basis.states.T * grid.dx
    np.testing.assert_allclose(overlap, np.eye(len(basis.sites)), atol=1e-10)


def test_dominant_lobe_is_positive(basis):
    for row in basis.states:
        assert row.max() > -row.min()


def test_fix_phase_is_idempotent(basis):
    np.testing.assert_array_equal(fix_phase(basis).states, basis.states)


def test_fix_phase_rejects_symmetric_lobes(basis):
    states = basis.states.copy()
    states[0] = 0.0
    states[0, 10], states[0, 20] = 1.0, -1.0
    with pytest.raises(DegenerateLobeError):
        fix_phase(replace(basis, states=states))


def test_fix_phase_restores_flipped_states(basis):
    states = basis.states.copy()
    states[[3, 40]] *= -1
    fixed = fix_phase(replace(basis, states=states))
    np.testing.assert_array_equal(fixed.states, basis.states)


def test_bulk_shrinks_away_from_the_walls(spectrum, grid, params, basis):
    narrow = extract_wss_ladder(spectrum, grid, params, margin=1)
    lo, hi = narrow.bulk_range
    assert lo > -31 and hi < 30
    assert lo <= basis.bulk_range[0] and hi >= basis.bulk_range[1]
    assert narrow.ladder_error <= 1e-3 * params.omega_B


def test_ladder_holds_a_low_energy_packet(basis, grid):
    flat = solve_eigenproblem(grid, LatticeParams(2.5, 0.0))
    band = flat.states[: grid.n_sites]
    envelope = np.exp(-(grid.x ** 2) / (2 * 4.0 ** 2))
    packet = (band @ envelope * grid.dx) @ band
    packet /= np.sqrt(np.sum(packet ** 2) * grid.dx)
    c = basis.states @ packet * grid.dx
    assert np.sum(c ** 2) >= 0.99


def test_untilted_band_is_nearly_degenerate():
    spacings = []
    for n_sites in (16, 64):
        grid = GridSpec(n_sites=n_sites, points_per_site=16)
        band = solve_eigenproblem(grid, LatticeParams(2.5, 0.0)).energies[:n_sites]
        spacings.append(np.diff(band).max())
    assert spacings[1] < 0.5 * spacings[0]
    assert spacings[1] < 0.05


def test_nearest_neighbour_coupling(basis):
    X = basis.X
    assert X.X_p(1) == pytest.approx(0.13, abs=0.01)
    assert abs(X.X_p(2)) < abs(X.X_p(1))
    assert abs(X.X_p(3)) < abs(X.X_p(2))
    assert np.all(X.spread <= 1e-6)


def test_diagonal_follows_the_ladder(basis, grid):
    X = basis.X
    lo, hi = basis.bulk_range
    bulk = basis.states[basis.bulk_slice()]
    diagonal = np.einsum("ij,ij->i", bulk * grid.x, bulk) * grid.dx
    np.testing.assert_allclose(diagonal, X.diagonal(np.arange(lo, hi + 1)), atol=1e-6)


def test_coupling_table_accessors():
    table = CouplingTable(np.array([0.4, 0.13, -0.02]), np.zeros(3))
    assert table.p_max == 2
    assert table.X_p(-1) == table.X_p(1) == 0.13
    assert table.X_p(5) == 0.0
    with pytest.raises(ValueError):
        table.X_p(0)
    matrix = table.matrix(np.arange(-2, 3))
    np.testing.assert_allclose(matrix, matrix.T)
    np.testing.assert_allclose(np.diag(matrix), [-1.6, -0.6, 0.4, 1.4, 2.4])
    assert matrix[0, 2] == -0.02
    assert table.as_dict()["X1"] == 0.13


def test_ladder_needs_a_tilt():
    grid = GridSpec(n_sites=16, points_per_site=8)
    spectrum = solve_eigenproblem(grid, LatticeParams(2.5, 0.0))
    with pytest.raises(ValueError):
        extract_wss_ladder(spectrum)


def test_exports(basis, tmp_path):
    energies = export_energies_csv(tmp_path / "energies.csv", basis).read_text().splitlines()
    assert energies[0] == "n,E_n,bulk"
    assert len(energies) == len(basis.sites) + 1
    states = export_states_csv(tmp_path / "states.csv", basis, sites=[0, 1]).read_text().splitlines()
    assert states[0] == "x,phi_0,phi_1"
    data = json.loads(export_couplings_json(tmp_path / "couplings.json", basis).read_text())
    assert data["X1"] == pytest.approx(basis.X.X_p(1))
    assert data["bulk_range"] == list(basis.bulk_range)


@pytest.mark.slow
def test_coupling_shrinks_with_depth(grid):
    values = [build_basis(grid, LatticeParams(V0, 0.5)).X.X_p(1) for V0 in (2.5, 5.0, 10.0)]
    assert values[0] > values[1] > values[2] > 0


@pytest.mark.slow
def test_deep_steep_lattice_localizes_in_one_well(grid):
    deep = build_basis(grid, LatticeParams(10.0, 2.0))
    masses = deep.well_masses()
    for n in deep.bulk_sites:
        i = deep.index_of(n)
        assert masses[i, i] >= 0.99
