"""Split-operator propagation of the boxed Schrodinger equation and the lab/accelerated frame map."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Tuple

import numpy as np
from scipy.fft import fft, fftfreq, ifft

from modules.Basis import WSBasis
from modules.Errors import FrameError, GridMismatchError, NormDriftError, SupportError, WallContactError
from modules.Lattice import (
    M_STAR,
    WELL_PHASE,
    GridSpec,
    LatticeParams,
    apply_hamiltonian,
    build_potential,
    kinetic_energies,
    sine_transform,
    SampledFunction,
)
from modules.Observables import Trajectory, grid_moments

logger = logging.getLogger(__name__)

FRAMES = ("lab", "accelerated")
MODULATION_KINDS = ("none", "phase", "force")
NORM_TOL = 1e-6
WALL_TOL = 1e-6
SUPPORT_TOL = 1e-4


@dataclass(frozen=True)
class ModulationSpec:
    """Lattice phase modulation x0(t) = a sin(wt), or its inertial force -F0 sin(wt)."""

    kind: str = "none"
    a: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in MODULATION_KINDS:
            raise ValueError(f"modulation kind must be one of {MODULATION_KINDS}, got '{self.kind}'")
        if self.kind != "none" and not self.omega > 0:
            raise ValueError("a modulated lattice needs omega > 0")
        if self.a < 0:
            raise ValueError("modulation amplitude must be non-negative")

    @classmethod
    def from_params(cls, params: LatticeParams, kind: str = "phase") -> "ModulationSpec":
        if params.a == 0 or params.omega == 0:
            return cls("none", params.a, params.omega)
        return cls(kind, params.a, params.omega)

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.a > 0

    @property
    def F0(self) -> float:
        return M_STAR * self.a * self.omega ** 2

    def X0(self, t: float) -> float:
        return self.a * math.sin(self.omega * t) if self.active else 0.0

    def X0_dot(self, t: float) -> float:
        return self.a * self.omega * math.cos(self.omega * t) if self.active else 0.0

    def inertial_force(self, t: float) -> float:
        return -self.F0 * math.sin(self.omega * t) if self.active else 0.0


@dataclass(frozen=True)
class Wavepacket:
    grid: GridSpec
    psi: np.ndarray = field(repr=False)
    t: float = 0.0
    frame: str = "accelerated"
    sites: Optional[np.ndarray] = field(default=None, repr=False)
    coefficients: Optional[np.ndarray] = field(default=None, repr=False)
    residual: Optional[float] = None

    def __post_init__(self) -> None:
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got '{self.frame}'")
        if len(self.psi) != self.grid.points:
            raise GridMismatchError(f"state has {len(self.psi)} samples, grid has {self.grid.points}")

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.psi) ** 2) * self.grid.dx)

    def density(self) -> np.ndarray:
        return np.abs(self.psi) ** 2


def wavepacket_from_coefficients(basis: WSBasis, coefficients, frame: str = "accelerated") -> Wavepacket:
    """Assemble psi = sum_n c_n phi_n, keeping only bulk sites."""
    c = np.asarray(coefficients, dtype=complex)
    if len(c) != len(basis.sites):
        raise ValueError(f"expected {len(basis.sites)} coefficients, got {len(c)}")
    total = float(np.sum(np.abs(c) ** 2))
    if total == 0:
        raise ValueError("wavepacket has no amplitude")
    outside = ~basis.in_bulk(basis.sites)
    lost = float(np.sum(np.abs(c[outside]) ** 2)) / total
    if lost > SUPPORT_TOL:
        raise SupportError(
            f"{lost:.2e} of the packet lies on sites outside the bulk {basis.bulk_range[0]}..{basis.bulk_range[1]}"
        )
    c = np.where(outside, 0.0, c)
    c = c / math.sqrt(np.sum(np.abs(c) ** 2))
    psi = c @ basis.states
    return Wavepacket(basis.grid, psi, 0.0, frame, basis.sites.copy(), c, 0.0)


def prepare_wavepacket(basis: WSBasis, envelope: Callable[[np.ndarray], np.ndarray], k0: float, frame: str = "accelerated") -> Wavepacket:
    sites = basis.sites
    amplitude = np.asarray(envelope(sites), dtype=float) * np.ones(len(sites))
    if np.any(amplitude < 0):
        raise ValueError("envelope must be non-negative")
    return wavepacket_from_coefficients(basis, amplitude * np.exp(1j * k0 * basis.params.d * sites), frame)


def gaussian_envelope(center: float, width: float) -> Callable[[np.ndarray], np.ndarray]:
    """Amplitude envelope whose probability |c_n|^2 has RMS ``width`` sites."""
    if width <= 0:
        raise ValueError("envelope width must be positive")
    return lambda n: np.exp(-((np.asarray(n, dtype=float) - center) ** 2) / (4 * width ** 2))


def single_site_envelope(center: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda n: (np.asarray(n) == int(center)).astype(float)


def project_onto_wss(state: Wavepacket, basis: WSBasis) -> Tuple[np.ndarray, float]:
    if state.grid != basis.grid:
        raise GridMismatchError("state and basis live on different grids")
    c = basis.states @ state.psi * basis.grid.dx
    residual = 1.0 - float(np.sum(np.abs(c) ** 2))
    return c, residual


def _shift(psi: np.ndarray, grid: GridSpec, distance: float) -> np.ndarray:
    """psi(x - distance) through a Fourier phase, wall sample pinned to zero."""
    if distance == 0:
        return psi.copy()
    k = 2 * math.pi * fftfreq(grid.points, grid.dx)
    out = ifft(fft(psi) * np.exp(-1j * k * distance))
    out[0] = 0.0
    return out


def frame_phase(mod: ModulationSpec, params: LatticeParams, t: float) -> float:
    """Global phase g(t) of the map psi_lab(x) = exp(i(beta x + g)) phi(x - X0)."""
    if not mod.active:
        return 0.0
    w, a = mod.omega, mod.a
    drift = params.F * a * (1 - math.cos(w * t)) / w
    kinetic = M_STAR * a ** 2 * w ** 2 * (-t / 4 + 3 * math.sin(2 * w * t) / (8 * w))
    return -(drift + kinetic)


def frame_transform(state: Wavepacket, mod: ModulationSpec, t: Optional[float] = None, direction: str = "accelerated->lab", params: Optional[LatticeParams] = None) -> Wavepacket:
    source, _, target = direction.partition("->")
    if source not in FRAMES or target not in FRAMES or source == target:
        raise FrameError(f"unknown frame direction '{direction}'")
    if state.frame != source:
        raise FrameError(f"state is tagged '{state.frame}' but the transform starts from '{source}'")
    t = state.t if t is None else t
    if not mod.active:
        return replace(state, frame=target, coefficients=None, residual=None)

    grid = state.grid
    X0 = mod.X0(t)
    beta = M_STAR * mod.X0_dot(t)
    if params is None:
        raise FrameError("a modulated frame change needs the lattice parameters for its global phase")
    g = frame_phase(mod, params, t)
    phase = np.exp(1j * (beta * grid.x + g))
    if source == "accelerated":
        psi = _shift(state.psi, grid, X0) * phase
    else:
        psi = _shift(state.psi * np.conj(phase), grid, -X0)
    psi[0] = 0.0
    return replace(state, psi=psi, frame=target, t=t, coefficients=None, residual=None)


def time_dependent_potential(grid: GridSpec, params: LatticeParams, mod: ModulationSpec, frame: str) -> Callable[[float], np.ndarray]:
    base = build_potential(grid, params).values
    if not mod.active:
        return lambda t: base
    if mod.kind == "phase" and frame == "lab":
        return lambda t: build_potential(grid, params, WELL_PHASE + mod.X0(t)).values
    x = grid.x
    return lambda t: base + mod.inertial_force(t) * x


def energy(state: Wavepacket, params: LatticeParams, mod: Optional[ModulationSpec] = None, t: Optional[float] = None) -> float:
    """<psi|H(t)|psi> in the state's own frame."""
    mod = mod or ModulationSpec()
    t = state.t if t is None else t
    potential = SampledFunction(state.grid, time_dependent_potential(state.grid, params, mod, state.frame)(t))
    h_psi = apply_hamiltonian(state.psi, potential, params)
    return float(np.real(np.vdot(state.psi, h_psi)) * state.grid.dx)


def propagate(
    state: Wavepacket,
    params: LatticeParams,
    mod: ModulationSpec,
    t_end: float,
    dt: float = 1e-3,
    sample_every: int = 100,
    basis: Optional[WSBasis] = None,
    snapshot_times: Iterable[float] = (),
    progress: Optional[Callable[[int, int], None]] = None,
    norm_tol: float = NORM_TOL,
    wall_tol: float = WALL_TOL,
) -> Trajectory:
    grid = state.grid
    if basis is not None and basis.grid != grid:
        raise GridMismatchError("basis and state live on different grids")
    duration = t_end - state.t
    if duration <= 0:
        raise ValueError(f"t_end {t_end} must lie after the state time {state.t}")
    if dt <= 0 or sample_every < 1:
        raise ValueError("dt must be positive and sample_every at least 1")
    steps = max(1, int(math.ceil(duration / dt - 1e-6)))
    dt = duration / steps

    kinetic = kinetic_energies(grid, params)
    if dt * kinetic.max() > math.pi or (mod.active and dt * mod.omega > 0.1):
        logger.warning(
            f"Time step {dt:.2e} under-resolves the dynamics "
            f"(dt*T_max={dt * kinetic.max():.2f}, dt*omega={dt * mod.omega:.3f})"
        )
    kinetic_phase = np.exp(-1j * kinetic * dt)
    potential_at = time_dependent_potential(grid, params, mod, state.frame)

    snapshot_steps = {}
    for ts in snapshot_times:
        step = int(round((ts - state.t) / dt))
        if 0 <= step <= steps:
            snapshot_steps[step] = ts

    left, right = grid.site_slice(grid.sites[0]), grid.site_slice(grid.sites[-1])
    psi = np.array(state.psi, dtype=complex)
    psi[0] = 0.0
    initial_norm = state.norm
    records = {"t": [], "mean_x": [], "width": [], "norm": [], "residual": [], "c": []}
    snapshots = {}

    def record(step: int) -> None:
        t = state.t + step * dt
        total, mean, spread = grid_moments(psi, grid)
        if abs(total - initial_norm) > norm_tol:
            raise NormDriftError(f"Norm drifted to {total:.9f} at t={t:.4f} (tolerance {norm_tol:.0e})")
        wall = max(np.sum(np.abs(psi[left]) ** 2), np.sum(np.abs(psi[right]) ** 2)) * grid.dx
        if wall > wall_tol:
            raise WallContactError(f"Packet reached the box wall at t={t:.4f} (edge-site mass {wall:.2e})")
        records["t"].append(t)
        records["mean_x"].append(mean)
        records["width"].append(spread)
        records["norm"].append(total)
        if basis is not None:
            c = basis.states @ psi * grid.dx
            records["c"].append(c)
            records["residual"].append(total - float(np.sum(np.abs(c) ** 2)))
        else:
            records["residual"].append(np.nan)

    logger.info(f"Propagating {steps} steps of dt={dt:.2e} in the {state.frame} frame ({mod.kind} modulation)")
    record(0)
    if 0 in snapshot_steps:
        snapshots[snapshot_steps[0]] = Wavepacket(grid, psi.copy(), state.t, state.frame)
    for step in range(1, steps + 1):
        t_mid = state.t + (step - 0.5) * dt
        half = np.exp(-0.5j * potential_at(t_mid) * dt)
        psi *= half
        psi[1:] = sine_transform(kinetic_phase * sine_transform(psi[1:]))
        psi *= half
        psi[0] = 0.0
        if step in snapshot_steps:
            snapshots[snapshot_steps[step]] = Wavepacket(grid, psi.copy(), state.t + step * dt, state.frame)
        if step % sample_every == 0 or step == steps:
            record(step)
            if progress is not None:
                progress(step, steps)

    final = Wavepacket(grid, psi, state.t + steps * dt, state.frame)
    return Trajectory(
        representation="grid",
        t=records["t"],
        mean_x=records["mean_x"],
        width=records["width"],
        norm=records["norm"],
        residual=records["residual"],
        sites=basis.sites.copy() if basis is not None else None,
        coefficients=np.array(records["c"]) if basis is not None else None,
        snapshots=snapshots,
        meta={"dt": dt, "steps": steps, "frame": state.frame, "final": final},
    )


def export_snapshot_csv(path, state: Wavepacket) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "density"])
        for x, rho in zip(state.grid.x, state.density()):
            writer.writerow([f"{x:.10g}", f"{rho:.10g}"])
    return path
