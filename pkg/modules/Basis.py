"""Boxed eigenproblem of the tilted lattice and the ground Wannier-Stark ladder built from it."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, eigh

from modules.Errors import (
    AmbiguousAssignmentError,
    CouplingSpreadError,
    DegenerateLobeError,
    EigenSolverError,
    LadderError,
    MissingWellError,
)
from modules.Lattice import GridSpec, LatticeParams, build_potential, kinetic_matrix

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8
DEFAULT_MARGIN = 8
LADDER_TOL = 1e-3  # in units of omega_B
TRANSLATION_TOL = 1e-3
ASSIGNMENT_WINDOW = 0.25  # in units of omega_B
MIN_WELL_MASS = 0.5
LOBE_TOL = 0.01
SPREAD_TOL = 1e-6


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigenpairs of the boxed H0, one state per row, energies ascending."""

    grid: GridSpec
    params: LatticeParams
    energies: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    max_residual: float = 0.0

    def __len__(self) -> int:
        return len(self.energies)

    def __iter__(self) -> Iterator[Tuple[float, np.ndarray]]:
        for energy, state in zip(self.energies, self.states):
            yield float(energy), state


@dataclass(frozen=True)
class CouplingTable:
    """Position matrix elements of the ladder.

    ``X[p]`` is X_p = <phi_n|x|phi_{n+p}> for p >= 1 and ``X[0]`` is X00, so
    that X_nn = X00 + n*d. ``spread`` holds the max-min over bulk n of each.
    """

    X: np.ndarray
    spread: np.ndarray
    d: float = 1.0

    @property
    def p_max(self) -> int:
        return len(self.X) - 1

    @property
    def X00(self) -> float:
        return float(self.X[0])

    def X_p(self, p: int) -> float:
        p = abs(int(p))
        if p == 0:
            raise ValueError("X_0 depends on the site; use diagonal(n)")
        if p > self.p_max:
            return 0.0
        return float(self.X[p])

    def diagonal(self, n) -> np.ndarray:
        return self.X00 + np.asarray(n, dtype=float) * self.d

    def matrix(self, sites: np.ndarray, include_diagonal: bool = True) -> np.ndarray:
        """Banded X_{n,m} on the given consecutive sites."""
        sites = np.asarray(sites)
        size = len(sites)
        out = np.diag(self.diagonal(sites)) if include_diagonal else np.zeros((size, size))
        for p in range(1, min(self.p_max, size - 1) + 1):
            band = np.full(size - p, self.X[p])
            out += np.diag(band, p) + np.diag(band, -p)
        return out

    def as_dict(self) -> dict:
        data = {"X00": self.X00, "p_max": self.p_max}
        for p in range(1, self.p_max + 1):
            data[f"X{p}"] = float(self.X[p])
            data[f"X{p}_spread"] = float(self.spread[p])
        data["X00_spread"] = float(self.spread[0])
        return data


@dataclass(frozen=True)
class WSBasis:
    grid: GridSpec
    params: LatticeParams
    sites: np.ndarray = field(repr=False)
    energies: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    bulk_range: Tuple[int, int] = (0, 0)
    energy_offset: float = 0.0
    ladder_error: float = 0.0
    translation_error: float = 0.0
    discarded: int = 0
    X: Optional[CouplingTable] = None

    def index_of(self, n: int) -> int:
        idx = int(n) - int(self.sites[0])
        if idx < 0 or idx >= len(self.sites):
            raise KeyError(f"site {n} is outside the box")
        return idx

    def state(self, n: int) -> np.ndarray:
        return self.states[self.index_of(n)]

    def energy(self, n: int) -> float:
        return float(self.energies[self.index_of(n)])

    @property
    def bulk_sites(self) -> np.ndarray:
        lo, hi = self.bulk_range
        return np.arange(lo, hi + 1)

    def in_bulk(self, n) -> np.ndarray:
        lo, hi = self.bulk_range
        n = np.asarray(n)
        return (n >= lo) & (n <= hi)

    def bulk_slice(self) -> slice:
        lo, hi = self.bulk_range
        return slice(self.index_of(lo), self.index_of(hi) + 1)

    def well_masses(self) -> np.ndarray:
        return self.grid.site_masses(self.states)


def solve_eigenproblem(grid: GridSpec, params: LatticeParams, cutoff: Optional[float] = None) -> EigenSpectrum:
    potential = build_potential(grid, params).values
    if cutoff is None:
        cutoff = float(potential.max())
    # wall sample 0 is pinned, the solve runs on the interior samples only
    hamiltonian = kinetic_matrix(grid, params)
    hamiltonian[np.diag_indices_from(hamiltonian)] += potential[1:]
    logger.debug(f"Solving boxed H0 with {grid.points - 1} interior points below E={cutoff:.4f}")
    try:
        energies, vectors = eigh(hamiltonian, subset_by_value=(-np.inf, cutoff), driver="evr")
    except (LinAlgError, ValueError) as e:
        raise EigenSolverError(f"Eigensolver failed to converge: {e}") from e
    if energies.size == 0:
        raise EigenSolverError(f"No eigenstates below the cutoff {cutoff:.4f}")

    residual = np.linalg.norm(hamiltonian @ vectors - vectors * energies, axis=0)
    max_residual = float(residual.max())
    if max_residual > RESIDUAL_TOL:
        raise EigenSolverError("Eigenpairs fail the residual check", residual=max_residual)

    states = np.zeros((energies.size, grid.points))
    states[:, 1:] = vectors.T / math.sqrt(grid.dx)
    logger.info(f"Solved {energies.size} eigenstates below E={cutoff:.4f} (max residual {max_residual:.2e})")
    return EigenSpectrum(grid, params, energies, states, max_residual)


def _shift_by_site(state: np.ndarray, grid: GridSpec, sites: int = 1) -> np.ndarray:
    """phi(x - sites*d) sampled on the grid, zero where it enters from the wall."""
    step = sites * grid.points_per_site
    out = np.zeros_like(state)
    if step >= 0:
        out[step:] = state[: grid.points - step]
    else:
        out[:step] = state[-step:]
    return out


def _ladder_errors(sites, energies, states, grid: GridSpec, omega_B: float) -> Tuple[float, float]:
    offsets = energies - sites * omega_B
    ladder_error = float(np.ptp(offsets)) if len(offsets) > 1 else 0.0
    translation_error = 0.0
    for current, following in zip(states[:-1], states[1:]):
        shifted = _shift_by_site(current, grid)
        diff = min(np.sum((following - shifted) ** 2), np.sum((following + shifted) ** 2))
        translation_error = max(translation_error, math.sqrt(diff * grid.dx))
    return ladder_error, translation_error


def extract_wss_ladder(
    spectrum: EigenSpectrum,
    grid: Optional[GridSpec] = None,
    params: Optional[LatticeParams] = None,
    margin: int = DEFAULT_MARGIN,
) -> WSBasis:
    """Pick the ground-ladder state of every well and find the bulk.

    The bulk starts ``margin`` wells in from each wall and only shrinks until the
    ladder and translation laws hold; it never grows past ``margin``, since the
    coupling spread check is far tighter than the ladder tolerance.
    """
    grid = grid or spectrum.grid
    params = params or spectrum.params
    if params.F <= 0:
        raise ValueError("the Wannier-Stark ladder needs a positive tilt F")
    omega_B = params.omega_B

    masses = grid.site_masses(spectrum.states)
    owner = np.argmax(masses, axis=1)
    own_mass = masses[np.arange(len(owner)), owner]
    wells = grid.sites

    candidates = {}
    for idx, well_idx in enumerate(owner):
        if own_mass[idx] >= MIN_WELL_MASS:
            candidates.setdefault(int(well_idx), []).append(idx)

    missing = [int(wells[i]) for i in range(grid.n_sites) if i not in candidates]
    if missing:
        raise MissingWellError(f"No localized eigenstate found for wells {missing}")

    # lowest state per well sits on the ground ladder
    offsets = [spectrum.energies[min(candidates[i])] - wells[i] * omega_B for i in range(grid.n_sites)]
    energy_offset = float(np.median(offsets))

    chosen = []
    for i, n in enumerate(wells):
        target = energy_offset + n * omega_B
        members = sorted(candidates[i], key=lambda idx: abs(spectrum.energies[idx] - target))
        if len(members) > 1 and abs(spectrum.energies[members[1]] - target) <= ASSIGNMENT_WINDOW * omega_B:
            raise AmbiguousAssignmentError(
                f"Well {n}: states at E={spectrum.energies[members[0]]:.5f} and "
                f"E={spectrum.energies[members[1]]:.5f} both match the ladder"
            )
        chosen.append(members[0])

    chosen = np.array(chosen)
    energies = spectrum.energies[chosen]
    states = spectrum.states[chosen]
    discarded = len(spectrum) - len(chosen)

    bulk = None
    errors = (math.inf, math.inf)
    for m in range(margin, grid.n_sites // 2 - 1):
        sl = slice(m, grid.n_sites - m)
        errors = _ladder_errors(wells[sl], energies[sl], states[sl], grid, omega_B)
        if errors[0] <= LADDER_TOL * omega_B and errors[1] <= TRANSLATION_TOL:
            bulk = (int(wells[sl][0]), int(wells[sl][-1]))
            break
        logger.debug(f"Margin {m}: ladder error {errors[0]:.2e}, translation error {errors[1]:.2e}")
    if bulk is None:
        raise LadderError(
            f"Ladder laws never hold in the bulk (ladder error {errors[0]:.2e}, translation error {errors[1]:.2e})"
        )

    logger.info(
        f"Ground ladder: {len(chosen)} states, bulk sites {bulk[0]}..{bulk[1]}, "
        f"{discarded} excited states discarded"
    )
    return WSBasis(
        grid=grid,
        params=params,
        sites=wells.copy(),
        energies=energies,
        states=states,
        bulk_range=bulk,
        energy_offset=energy_offset,
        ladder_error=errors[0],
        translation_error=errors[1],
        discarded=discarded,
    )


def fix_phase(basis: WSBasis) -> WSBasis:
    """Make the dominant lobe of every state positive."""
    states = basis.states.copy()
    for row, n in zip(states, basis.sites):
        top, bottom = row.max(), -row.min()
        if abs(top - bottom) <= LOBE_TOL * max(top, bottom):
            raise DegenerateLobeError(f"State of well {n} has no dominant lobe ({top:.4g} vs {-bottom:.4g})")
        if bottom > top:
            row *= -1
    return replace(basis, states=states)


def coupling_matrix(basis: WSBasis, p_max: int = 3, spread_tol: float = SPREAD_TOL) -> CouplingTable:
    if p_max < 1:
        raise ValueError("p_max must be at least 1")
    grid = basis.grid
    bulk = basis.states[basis.bulk_slice()]
    sites = basis.bulk_sites
    if p_max >= len(sites):
        raise ValueError(f"p_max {p_max} needs more than {len(sites)} bulk sites")

    x_matrix = (bulk * grid.x) @ bulk.T * grid.dx
    values = np.zeros(p_max + 1)
    spread = np.zeros(p_max + 1)
    diagonal = np.diag(x_matrix) - sites * basis.params.d
    values[0], spread[0] = diagonal.mean(), np.ptp(diagonal)
    for p in range(1, p_max + 1):
        band = np.diag(x_matrix, p)
        values[p], spread[p] = band.mean(), np.ptp(band)

    if spread[1:].max() > spread_tol or spread[0] > spread_tol:
        worst = int(np.argmax(spread))
        raise CouplingSpreadError(
            f"X_{worst} varies by {spread[worst]:.2e} across the bulk; the bulk range touches the walls"
        )
    logger.info("Couplings: " + ", ".join(f"X{p}={values[p]:.6f}" for p in range(p_max + 1)))
    return CouplingTable(values, spread, basis.params.d)


def build_basis(grid: GridSpec, params: LatticeParams, p_max: int = 3, margin: int = DEFAULT_MARGIN) -> WSBasis:
    spectrum = solve_eigenproblem(grid, params)
    basis = fix_phase(extract_wss_ladder(spectrum, grid, params, margin=margin))
    return replace(basis, X=coupling_matrix(basis, p_max))


def export_energies_csv(path, basis: WSBasis) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "E_n", "bulk"])
        for n, energy in zip(basis.sites, basis.energies):
            writer.writerow([int(n), f"{energy:.12g}", int(basis.in_bulk(n))])
    return path


def export_states_csv(path, basis: WSBasis, sites=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sites = list(basis.sites if sites is None else sites)
    columns = [basis.state(n) for n in sites]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x"] + [f"phi_{n}" for n in sites])
        for j, x in enumerate(basis.grid.x):
            writer.writerow([f"{x:.10g}"] + [f"{col[j]:.10g}" for col in columns])
    return path


def export_couplings_json(path, basis: WSBasis) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(basis.X.as_dict()) if basis.X is not None else {}
    data.update(
        {
            "bulk_range": list(basis.bulk_range),
            "energy_offset": basis.energy_offset,
            "ladder_error": basis.ladder_error,
            "translation_error": basis.translation_error,
            "discarded_states": basis.discarded,
        }
    )
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
