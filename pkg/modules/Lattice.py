"""Dimensionless lattice units, the boxed spatial grid and the tilted-lattice Hamiltonian.

Lengths are in lattice periods (d = 1), energies in recoil energies and times
in inverse recoil frequencies, so the kinetic term is P^2/(2 m*) with
m* = pi^2/2 and hbar = 1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
import scipy.constants as const
from scipy.fft import dst

from modules.Errors import GridMismatchError

logger = logging.getLogger(__name__)

M_STAR = math.pi ** 2 / 2
LATTICE_PERIOD = 1.0
# lattice phase that puts the potential minimum of well n at x = n*d
WELL_PHASE = 0.5


@dataclass(frozen=True)
class LatticeParams:
    V0: float
    F: float
    a: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        if not self.V0 > 0:
            raise ValueError(f"lattice depth V0 must be positive, got {self.V0}")
        # F = 0 is the untilted reference lattice; ladder extraction rejects it.
        if self.F < 0:
            raise ValueError(f"tilt F must be non-negative, got {self.F}")
        if self.a < 0 or self.omega < 0:
            raise ValueError("modulation amplitude and frequency must be non-negative")

    @property
    def m_star(self) -> float:
        return M_STAR

    @property
    def d(self) -> float:
        return LATTICE_PERIOD

    @property
    def omega_B(self) -> float:
        return self.F * self.d


@dataclass(frozen=True)
class GridSpec:
    """Box of ``n_sites`` wells, well n occupying [n - 1/2, n + 1/2) in units of d.

    Samples sit at x_j = x_min + j*dx for j = 0..points-1; sample 0 lies on the
    left wall and the right wall x_max is implicit, both pinned to zero.
    """

    n_sites: int = 64
    points_per_site: int = 32
    x_min: float = None
    x_max: float = None

    def __post_init__(self) -> None:
        if self.n_sites < 2 or self.points_per_site < 4:
            raise ValueError("grid needs at least 2 sites and 4 points per site")
        if self.x_min is None:
            object.__setattr__(self, "x_min", -(self.n_sites // 2 + WELL_PHASE) * LATTICE_PERIOD)
        if self.x_max is None:
            object.__setattr__(self, "x_max", self.x_min + self.n_sites * LATTICE_PERIOD)
        if not math.isclose(self.x_max - self.x_min, self.n_sites * LATTICE_PERIOD, abs_tol=1e-12):
            raise ValueError("box length must equal n_sites lattice periods")
        if not float(self.x_min / LATTICE_PERIOD + WELL_PHASE).is_integer():
            raise ValueError("x_min must fall on a potential maximum between two wells")

    @property
    def points(self) -> int:
        return self.n_sites * self.points_per_site

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return self.length / self.points

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.points)

    @property
    def first_site(self) -> int:
        return int(round(self.x_min / LATTICE_PERIOD + WELL_PHASE))

    @property
    def sites(self) -> np.ndarray:
        return self.first_site + np.arange(self.n_sites)

    def site_slice(self, n: int) -> slice:
        start = (n - self.first_site) * self.points_per_site
        return slice(start, start + self.points_per_site)

    def site_masses(self, values: np.ndarray) -> np.ndarray:
        """Integrated |values|^2 per well; works on a single state or a stack of rows."""
        density = np.abs(values) ** 2 * self.dx
        return density.reshape(density.shape[:-1] + (self.n_sites, self.points_per_site)).sum(axis=-1)

    def wavenumbers(self) -> np.ndarray:
        # sine modes k = 1..points-1 of the Dirichlet box
        return np.arange(1, self.points) * math.pi / self.length


@dataclass(frozen=True)
class SampledFunction:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class UnitSystem:
    """Converter between SI quantities and the lattice's recoil units."""

    lambda_L: float
    M: float

    def __post_init__(self) -> None:
        if self.lambda_L <= 0 or self.M <= 0:
            raise ValueError("wavelength and mass must be positive")

    @classmethod
    def from_wavelength_and_mass(cls, wavelength_m: float, mass_amu: float) -> "UnitSystem":
        return cls(lambda_L=wavelength_m, M=mass_amu * const.atomic_mass)

    @property
    def k_L(self) -> float:
        return 2 * math.pi / self.lambda_L

    @property
    def E_R(self) -> float:
        return const.hbar ** 2 * self.k_L ** 2 / (2 * self.M)

    @property
    def omega_R(self) -> float:
        return self.E_R / const.hbar

    @property
    def p_R(self) -> float:
        return const.hbar * self.k_L

    def scales(self) -> Dict[str, float]:
        half_wavelength = self.lambda_L / 2
        return {
            "energy": self.E_R,
            "frequency": self.omega_R,
            "time": 1 / self.omega_R,
            "length": half_wavelength,
            # P = -i d/dX with X = x/(lambda/2), hbar = 1
            "momentum": const.hbar / half_wavelength,
            "force": self.E_R / half_wavelength,
        }

    def to_dimensionless(self, quantity: str, value: float) -> float:
        return value / self._scale(quantity)

    def to_physical(self, quantity: str, value: float) -> float:
        return value * self._scale(quantity)

    def _scale(self, quantity: str) -> float:
        scales = self.scales()
        if quantity not in scales:
            raise ValueError(f"unknown quantity '{quantity}', expected one of {sorted(scales)}")
        return scales[quantity]


def potential_value(x, params: LatticeParams, x0: float = WELL_PHASE):
    return params.V0 * np.cos(2 * math.pi * (np.asarray(x) - x0)) + params.F * np.asarray(x)


def build_potential(grid: GridSpec, params: LatticeParams, x0: float = WELL_PHASE) -> SampledFunction:
    """V0 cos(2 pi (x - x0)) + F x on the grid; the default x0 centres well n on x = n."""
    if not math.isfinite(x0):
        raise ValueError(f"lattice offset x0 must be finite, got {x0}")
    return SampledFunction(grid, potential_value(grid.x, params, x0))


def sine_transform(values: np.ndarray) -> np.ndarray:
    """Orthonormal DST-I along the last axis; it is its own inverse."""
    if np.iscomplexobj(values):
        return dst(values.real, type=1, norm="ortho") + 1j * dst(values.imag, type=1, norm="ortho")
    return dst(values, type=1, norm="ortho")


def kinetic_energies(grid: GridSpec, params: LatticeParams) -> np.ndarray:
    return grid.wavenumbers() ** 2 / (2 * params.m_star)


def apply_kinetic(state: np.ndarray, grid: GridSpec, params: LatticeParams) -> np.ndarray:
    state = np.asarray(state)
    out = np.zeros_like(state, dtype=np.result_type(state, float))
    out[..., 1:] = sine_transform(kinetic_energies(grid, params) * sine_transform(state[..., 1:]))
    return out


def kinetic_matrix(grid: GridSpec, params: LatticeParams) -> np.ndarray:
    """Dense spectral kinetic operator on the interior samples."""
    interior = grid.points - 1
    modes = dst(np.eye(interior), type=1, norm="ortho", axis=0)
    return modes @ (kinetic_energies(grid, params)[:, None] * modes)


def apply_hamiltonian(state: np.ndarray, potential: SampledFunction, params: LatticeParams) -> np.ndarray:
    state = np.asarray(state)
    grid = potential.grid
    if state.shape[-1] != grid.points:
        raise GridMismatchError(
            f"state has {state.shape[-1]} samples but the potential grid has {grid.points}"
        )
    out = apply_kinetic(state, grid, params) + np.asarray(potential) * state
    out[..., 0] = 0.0
    return out


def inner_product(bra: np.ndarray, ket: np.ndarray, grid: GridSpec) -> complex:
    return complex(np.vdot(bra, ket) * grid.dx)


def norm(state: np.ndarray, grid: GridSpec) -> float:
    return float(np.sum(np.abs(state) ** 2) * grid.dx)


def export_potential_csv(path, potential: SampledFunction) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "V"])
        for x, v in zip(potential.grid.x, potential.values):
            writer.writerow([f"{x:.10g}", f"{v:.12g}"])
    logger.info(f"Potential written to {path}")
    return path
