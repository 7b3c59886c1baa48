import logging
import math

import numpy as np
import pytest

from modules.Basis import build_basis
from modules.Errors import FrameError, GridMismatchError, SupportError, WallContactError
from modules.Lattice import GridSpec
from modules.Observables import fit_oscillation, grid_moments
from modules.Propagator import (
    ModulationSpec,
    Wavepacket,
    energy,
    export_snapshot_csv,
    frame_phase,
    frame_transform,
    gaussian_envelope,
    prepare_wavepacket,
    project_onto_wss,
    propagate,
    single_site_envelope,
    wavepacket_from_coefficients,
)
from modules.TightBinding import bare_wavenumber

PHASE = ModulationSpec("phase", a=0.2, omega=0.5)


@pytest.fixture(scope="module")
def packet(basis):
    return prepare_wavepacket(basis, gaussian_envelope(0, 3), 0.0)


def test_modulation_spec():
    assert PHASE.F0 == pytest.approx(math.pi ** 2 / 2 * 0.2 * 0.25)
    assert PHASE.X0(0.0) == 0.0
    assert PHASE.X0_dot(0.0) == pytest.approx(0.1)
    assert ModulationSpec().inertial_force(1.0) == 0.0
    with pytest.raises(ValueError):
        ModulationSpec("shake", a=0.2, omega=0.5)
    with pytest.raises(ValueError):
        ModulationSpec("phase", a=0.2, omega=0.0)


def test_quadrature_phase_between_sites(basis):
    state = prepare_wavepacket(basis, gaussian_envelope(0, 3), math.pi / 2)
    c = state.coefficients
    ratio = c[basis.index_of(1)] / c[basis.index_of(0)]
    assert np.angle(ratio) == pytest.approx(math.pi / 2, abs=1e-12)
    assert np.sum(np.abs(c) ** 2) == pytest.approx(1.0)


def test_in_phase_packet_is_real_and_positive(packet):
    c = packet.coefficients
    assert np.all(np.abs(c.imag) < 1e-15)
    assert np.all(c.real >= 0)
    assert packet.norm == pytest.approx(1.0, abs=1e-10)


def test_packet_must_fit_the_bulk(basis):
    with pytest.raises(SupportError):
        prepare_wavepacket(basis, single_site_envelope(-30), 0.0)
    with pytest.raises(ValueError):
        wavepacket_from_coefficients(basis, np.ones(3))


def test_wavepacket_checks_grid(grid):
    with pytest.raises(GridMismatchError):
        Wavepacket(grid, np.zeros(grid.points - 1, dtype=complex))


def test_projection_recovers_coefficients(packet, basis):
    c, residual = project_onto_wss(packet, basis)
    np.testing.assert_allclose(c, packet.coefficients, atol=1e-10)
    assert residual == pytest.approx(0.0, abs=1e-10)


def test_excited_state_lies_outside_the_ladder(spectrum, basis, grid):
    excited = np.flatnonzero(~np.isin(spectrum.energies, basis.energies))[0]
    state = Wavepacket(grid, spectrum.states[excited].astype(complex))
    _, residual = project_onto_wss(state, basis)
    assert residual == pytest.approx(1.0, abs=1e-8)


def test_frame_round_trip(packet, params):
    moved = Wavepacket(packet.grid, packet.psi, t=0.7)
    lab = frame_transform(moved, PHASE, params=params)
    assert lab.frame == "lab"
    back = frame_transform(lab, PHASE, direction="lab->accelerated", params=params)
    np.testing.assert_allclose(back.psi, moved.psi, atol=1e-10)


def test_lab_centroid_follows_the_lattice(packet, params):
    moved = Wavepacket(packet.grid, packet.psi, t=0.7)
    lab = frame_transform(moved, PHASE, params=params)
    shift = grid_moments(lab.psi, lab.grid)[1] - grid_moments(moved.psi, moved.grid)[1]
    assert shift == pytest.approx(PHASE.X0(0.7), abs=1e-6)


def test_frame_at_zero_time_is_a_boost(packet, params):
    lab = frame_transform(packet, PHASE, t=0.0, params=params)
    beta = math.pi ** 2 / 2 * PHASE.X0_dot(0.0)
    np.testing.assert_allclose(lab.psi, np.exp(1j * beta * packet.grid.x) * packet.psi, atol=1e-12)


def test_frame_errors(packet, params):
    with pytest.raises(FrameError):
        frame_transform(packet, PHASE, direction="lab->lab", params=params)
    with pytest.raises(FrameError):
        frame_transform(packet, PHASE, direction="lab->accelerated", params=params)
    with pytest.raises(FrameError):
        frame_transform(packet, PHASE)
    assert frame_transform(packet, ModulationSpec()).frame == "lab"


def test_lab_state_carries_the_global_phase(packet, params):
    # one drive period: the lattice is back at rest and moving at a*omega
    t = 2 * math.pi / PHASE.omega
    lab = frame_transform(Wavepacket(packet.grid, packet.psi, t=t), PHASE, params=params)
    g = frame_phase(PHASE, params, t)
    assert g == pytest.approx(math.pi ** 2 / 2 * PHASE.a ** 2 * PHASE.omega ** 2 * t / 4, rel=1e-12)
    beta = math.pi ** 2 / 2 * PHASE.X0_dot(t)
    np.testing.assert_allclose(lab.psi, np.exp(1j * (beta * packet.grid.x + g)) * packet.psi, atol=1e-10)


def test_undriven_energy_is_conserved(packet, params):
    run = propagate(packet, params, ModulationSpec(), t_end=0.5, dt=2.5e-5, sample_every=1000)
    assert energy(run.meta["final"], params) == pytest.approx(energy(packet, params), rel=1e-6)
    assert np.all(np.abs(run.norm - 1.0) < 1e-9)


def test_energy_stays_bounded_over_a_bloch_period(packet, params):
    run = propagate(packet, params, ModulationSpec(), t_end=2 * math.pi / params.omega_B)
    assert energy(run.meta["final"], params) == pytest.approx(energy(packet, params), abs=1e-4)


def test_propagate_rejects_bad_times(packet, params):
    with pytest.raises(ValueError):
        propagate(packet, params, ModulationSpec(), t_end=0.0)
    with pytest.raises(ValueError):
        propagate(packet, params, ModulationSpec(), t_end=1.0, dt=-1e-3)


def test_wall_contact_is_detected(basis, grid, params):
    state = Wavepacket(grid, basis.state(-32).astype(complex))
    with pytest.raises(WallContactError):
        propagate(state, params, ModulationSpec(), t_end=0.01)


def test_ladder_state_is_stationary(basis, params):
    state = prepare_wavepacket(basis, single_site_envelope(0), 0.0)
    run = propagate(state, params, ModulationSpec(), t_end=5.0, basis=basis)
    assert np.ptp(run.mean_x) < 1e-4
    assert np.ptp(run.width) < 1e-4
    assert abs(run.residual[0]) < 1e-8


def test_undriven_centroid_oscillates_at_the_bloch_frequency(packet, params):
    run = propagate(packet, params, ModulationSpec(), t_end=3 * 2 * math.pi / params.omega_B)
    fit = fit_oscillation(run.t, run.mean_x)
    assert fit.frequency == pytest.approx(params.omega_B, rel=1e-2)


def test_coarse_step_is_reported(packet, params, caplog):
    with caplog.at_level(logging.WARNING):
        propagate(packet, params, ModulationSpec(), t_end=0.01, dt=0.005, sample_every=1)
    assert "under-resolves" in caplog.text


def test_snapshots_do_not_add_samples(packet, params, tmp_path):
    run = propagate(packet, params, ModulationSpec(), t_end=0.1, dt=1e-3, sample_every=50, snapshot_times=(0.0, 0.03))
    np.testing.assert_allclose(run.t, [0.0, 0.05, 0.1])
    assert sorted(run.snapshots) == [0.0, 0.03]
    lines = export_snapshot_csv(tmp_path / "snap.csv", run.snapshots[0.03]).read_text().splitlines()
    assert lines[0] == "x,density"
    assert len(lines) == packet.grid.points + 1


@pytest.mark.slow
def test_lab_and_accelerated_frames_agree(packet, params):
    t_end = 2 * math.pi / params.omega_B
    accelerated = propagate(packet, params, PHASE, t_end=t_end).meta["final"]
    lab_start = frame_transform(packet, PHASE, t=0.0, params=params)
    lab = propagate(lab_start, params, PHASE, t_end=t_end).meta["final"]
    back = frame_transform(lab, PHASE, direction="lab->accelerated", params=params)
    overlap = abs(np.vdot(accelerated.psi, back.psi) * packet.grid.dx) ** 2
    assert overlap >= 0.999


@pytest.mark.slow
def test_centroid_converges_in_step_and_grid(basis, params):
    t_end = 2 * 2 * math.pi / params.omega_B
    k0 = bare_wavenumber(0.0, PHASE)

    def final_mean_x(ladder, dt):
        start = prepare_wavepacket(ladder, gaussian_envelope(2, 5), k0)
        return propagate(start, params, PHASE, t_end=t_end, dt=dt, sample_every=1000).mean_x[-1]

    reference = final_mean_x(basis, 1e-3)
    assert final_mean_x(basis, 5e-4) == pytest.approx(reference, abs=1e-4)
    fine = build_basis(GridSpec(points_per_site=64), params)
    assert final_mean_x(fine, 1e-3) == pytest.approx(reference, abs=1e-3)
