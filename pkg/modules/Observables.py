"""Observables, fits and cross-model comparison for trajectories of any representation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import stats
from scipy.fft import rfft, rfftfreq
from scipy.optimize import curve_fit

from modules.Errors import DisjointTimeRangeError, FitError

logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = "# wannier-stark trajectory v1"
TRAJECTORY_COLUMNS = ["t", "mean_x", "width", "norm", "residual"]
REPRESENTATIONS = ("grid", "tight-binding", "secular", "envelope")


@dataclass
class Trajectory:
    representation: str
    t: np.ndarray
    mean_x: np.ndarray
    width: np.ndarray
    norm: np.ndarray
    residual: Optional[np.ndarray] = None
    sites: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    snapshots: Dict[float, object] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation '{self.representation}'")
        self.t = np.asarray(self.t, dtype=float)
        self.mean_x = np.asarray(self.mean_x, dtype=float)
        self.width = np.asarray(self.width, dtype=float)
        self.norm = np.asarray(self.norm, dtype=float)
        if self.residual is None:
            self.residual = np.full_like(self.t, np.nan)
        self.residual = np.asarray(self.residual, dtype=float)
        if len(self.t) == 0:
            raise ValueError("trajectory has no samples")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        for name in ("mean_x", "width", "norm", "residual"):
            if len(getattr(self, name)) != len(self.t):
                raise ValueError(f"column '{name}' does not match the number of timestamps")

    def __len__(self) -> int:
        return len(self.t)

    def check_norm(self, tol: float) -> float:
        drift = float(np.max(np.abs(self.norm - 1.0)))
        if drift > tol:
            raise ValueError(f"{self.representation} trajectory norm drifts by {drift:.2e} (tolerance {tol:.1e})")
        return drift

    def site_probabilities(self) -> np.ndarray:
        if self.coefficients is None:
            raise ValueError(f"{self.representation} trajectory carries no site amplitudes")
        return np.abs(self.coefficients) ** 2


@dataclass(frozen=True)
class OscillationFit:
    frequency: float
    amplitude: float
    phase: float
    offset: float
    covariance: np.ndarray = field(repr=False)
    peak_frequency: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True)
class VelocityFit:
    slope: float
    intercept: float
    r_squared: float
    stderr: float
    samples: int


@dataclass(frozen=True)
class ComparisonReport:
    t: np.ndarray = field(repr=False)
    max_dx: float
    max_dwidth: float
    fidelity: Optional[np.ndarray] = field(default=None, repr=False)
    fidelity_t: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def min_fidelity(self) -> Optional[float]:
        if self.fidelity is None or len(self.fidelity) == 0:
            return None
        return float(np.min(self.fidelity))

    def as_dict(self) -> dict:
        return {
            "max_dx": self.max_dx,
            "max_dwidth": self.max_dwidth,
            "min_fidelity": self.min_fidelity,
            "samples": int(len(self.t)),
        }


def grid_moments(psi: np.ndarray, grid) -> Tuple[float, float, float]:
    """Norm, mean position and RMS width of a grid state."""
    density = np.abs(psi) ** 2 * grid.dx
    total = float(density.sum())
    mean = float(np.dot(grid.x, density) / total)
    spread = float(np.dot((grid.x - mean) ** 2, density) / total)
    return total, mean, math.sqrt(max(spread, 0.0))


def site_moments(sites: np.ndarray, amplitudes: np.ndarray, d: float = 1.0) -> Tuple[float, float]:
    """Centroid and RMS width of |amplitudes|^2 over the site index, in units of length."""
    weights = np.abs(amplitudes) ** 2
    total = weights.sum(axis=-1)
    n = np.asarray(sites, dtype=float)
    mean = (weights @ n) / total
    spread = (weights @ n ** 2) / total - mean ** 2
    return mean * d, np.sqrt(np.maximum(spread, 0.0)) * d


def sublattice_centroids(sites: np.ndarray, amplitudes: np.ndarray, d: float = 1.0) -> Dict[str, np.ndarray]:
    sites = np.asarray(sites)
    out = {}
    for name, parity in (("odd", 1), ("even", 0)):
        mask = (sites % 2) == parity
        weights = np.abs(amplitudes[..., mask]) ** 2
        total = weights.sum(axis=-1)
        out[f"{name}_weight"] = total
        out[f"{name}_centroid"] = (weights @ sites[mask].astype(float)) / total * d
    return out


def wss_mean_position(sites, coefficients, X, energies=None, t: float = 0.0) -> float:
    """<x> from ladder coefficients, truncated at the table's p_max.

    With ``energies`` the coefficients are taken at t=0 and evolved freely to ``t``.
    """
    c = np.asarray(coefficients, dtype=complex)
    if energies is not None:
        c = c * np.exp(-1j * np.asarray(energies) * t)
    probabilities = np.abs(c) ** 2
    value = float(np.dot(X.diagonal(sites), probabilities))
    for p in range(1, X.p_max + 1):
        value += 2 * X.X_p(p) * float(np.real(np.vdot(c[:-p], c[p:])))
    return value / float(probabilities.sum())


def mean_position(state, X=None, t: float = 0.0, energies=None) -> float:
    if hasattr(state, "psi"):
        return grid_moments(state.psi, state.grid)[1]
    if X is None:
        raise ValueError("ladder coefficients need a coupling table to give <x>")
    if getattr(state, "representation", "bare") != "bare":
        raise ValueError("mean position needs bare coefficients c_n")
    return wss_mean_position(state.sites, state.amplitudes, X, energies=energies, t=t)


def width(state, d: float = 1.0) -> float:
    if hasattr(state, "psi"):
        return grid_moments(state.psi, state.grid)[2]
    return float(site_moments(state.sites, state.amplitudes, d)[1])


def _uniform(t: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    steps = np.diff(t)
    if np.allclose(steps, steps[0], rtol=1e-6, atol=0):
        return t, y
    grid = np.linspace(t[0], t[-1], len(t))
    return grid, np.interp(grid, t, y)


def _sinusoid(t, frequency, amplitude, phase, offset):
    return amplitude * np.sin(frequency * t + phase) + offset


def fit_oscillation(t, y, min_periods: float = 2.0, min_samples_per_period: float = 4.0) -> OscillationFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 8:
        raise FitError(f"Need at least 8 samples for an oscillation fit, got {len(t)}")
    t, y = _uniform(t, y)
    dt = t[1] - t[0]

    spectrum = np.abs(rfft(y - y.mean()))
    omegas = 2 * math.pi * rfftfreq(len(y), dt)
    spectrum[0] = 0.0
    k = int(np.argmax(spectrum))
    if k == 0 or k == len(spectrum) - 1:
        raise FitError("Spectral peak sits at the edge of the spectrum")
    # ambiguous if another local maximum away from the peak is nearly as strong
    interior = spectrum[1:-1]
    local_max = np.flatnonzero((interior >= spectrum[:-2]) & (interior >= spectrum[2:])) + 1
    rivals = [i for i in local_max if abs(i - k) > 1 and spectrum[i] >= 0.9 * spectrum[k]]
    if rivals:
        raise FitError(f"Ambiguous spectral peak: bins {k} and {rivals[0]} are within 10%")

    alpha, beta, gamma = spectrum[k - 1], spectrum[k], spectrum[k + 1]
    denom = alpha - 2 * beta + gamma
    shift = 0.5 * (alpha - gamma) / denom if denom != 0 else 0.0
    peak = (k + shift) * (omegas[1] - omegas[0])

    span = t[-1] - t[0]
    if span * peak / (2 * math.pi) < min_periods:
        raise FitError(f"Record covers {span * peak / (2 * math.pi):.2f} periods, need {min_periods}")
    if 2 * math.pi / (peak * dt) < min_samples_per_period:
        raise FitError("Fewer than 4 samples per period")

    design = np.column_stack([np.sin(peak * t), np.cos(peak * t), np.ones_like(t)])
    (s, c, offset), *_ = np.linalg.lstsq(design, y, rcond=None)
    p0 = [peak, math.hypot(s, c), math.atan2(c, s), offset]
    try:
        params, covariance = curve_fit(_sinusoid, t, y, p0=p0, maxfev=20000)
    except (RuntimeError, ValueError) as e:
        raise FitError(f"Sinusoid fit did not converge: {e}") from e
    if not np.all(np.isfinite(covariance)):
        raise FitError("Sinusoid fit covariance is not finite")

    frequency, amplitude, phase, offset = params
    if frequency < 0:
        frequency, phase = -frequency, math.pi - phase
    if amplitude < 0:
        amplitude, phase = -amplitude, phase + math.pi
    phase = math.atan2(math.sin(phase), math.cos(phase))
    logger.debug(f"Oscillation fit: omega={frequency:.6g}, A={amplitude:.6g}")
    return OscillationFit(float(frequency), float(amplitude), float(phase), float(offset), covariance, float(peak))


def period_average(t, y, period: float) -> Tuple[np.ndarray, np.ndarray]:
    """Means of t and y over each complete period of the record."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    index = np.floor((t - t[0]) / period + 1e-9).astype(int)
    complete = int(np.floor((t[-1] - t[0]) / period + 1e-9))
    t_mean, y_mean = [], []
    for k in range(complete):
        mask = index == k
        if mask.any():
            t_mean.append(t[mask].mean())
            y_mean.append(y[mask].mean())
    return np.array(t_mean), np.array(y_mean)


def fit_group_velocity(t, mean_x, period: Optional[float] = None, min_r2: float = 0.9, flat_ptp: float = 0.05) -> VelocityFit:
    t = np.asarray(t, dtype=float)
    mean_x = np.asarray(mean_x, dtype=float)
    if period:
        t_avg, x_avg = period_average(t, mean_x, period)
        if len(t_avg) >= 3:
            t, mean_x = t_avg, x_avg
        else:
            logger.warning(f"Only {len(t_avg)} complete periods, fitting the raw series")
    if len(t) < 3:
        raise FitError("Need at least three points for a velocity fit")
    result = stats.linregress(t, mean_x)
    r_squared = float(result.rvalue ** 2)
    # a series that barely moves is stationary, not a bad fit
    if np.ptp(mean_x) > flat_ptp and r_squared < min_r2:
        raise FitError(f"Centroid is not drift dominated (R^2={r_squared:.3f})")
    return VelocityFit(float(result.slope), float(result.intercept), r_squared, float(result.stderr), len(t))


def harmonic_amplitudes(t, y, base_frequency: float, count: int = 4) -> np.ndarray:
    """Least-squares amplitudes of the components at p*base_frequency, p = 1..count."""
    t = np.asarray(t, dtype=float)
    columns = [np.ones_like(t)]
    for p in range(1, count + 1):
        columns += [np.sin(p * base_frequency * t), np.cos(p * base_frequency * t)]
    coeffs, *_ = np.linalg.lstsq(np.column_stack(columns), np.asarray(y, dtype=float), rcond=None)
    return np.hypot(coeffs[1::2], coeffs[2::2])


def _shared_indices(ta: np.ndarray, tb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.clip(np.searchsorted(tb, ta), 0, len(tb) - 1)
    left = np.clip(pos - 1, 0, len(tb) - 1)
    nearest = np.where(np.abs(tb[left] - ta) < np.abs(tb[pos] - ta), left, pos)
    match = np.abs(tb[nearest] - ta) <= 1e-9 * np.maximum(1.0, np.abs(ta))
    return np.flatnonzero(match), nearest[match]


def fidelity_series(a: Trajectory, b: Trajectory) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Normalized overlap |<a|b>|^2 over the common sites, at the sample times both trajectories share."""
    if a.coefficients is None or b.coefficients is None:
        return None, None
    common, ia, ib = np.intersect1d(a.sites, b.sites, return_indices=True)
    if len(common) == 0:
        return None, None
    rows_a, rows_b = _shared_indices(a.t, b.t)
    ca = a.coefficients[rows_a][:, ia]
    cb = b.coefficients[rows_b][:, ib]
    overlap = np.abs(np.sum(np.conj(ca) * cb, axis=1)) ** 2
    norms = np.sum(np.abs(ca) ** 2, axis=1) * np.sum(np.abs(cb) ** 2, axis=1)
    return a.t[rows_a], overlap / norms


def compare_trajectories(a: Trajectory, b: Trajectory) -> ComparisonReport:
    start, stop = max(a.t[0], b.t[0]), min(a.t[-1], b.t[-1])
    if stop < start:
        raise DisjointTimeRangeError(
            f"{a.representation} [{a.t[0]}, {a.t[-1]}] and {b.representation} [{b.t[0]}, {b.t[-1]}] do not overlap"
        )
    mask = (a.t >= start) & (a.t <= stop)
    t = a.t[mask]
    dx = np.abs(a.mean_x[mask] - np.interp(t, b.t, b.mean_x))
    dwidth = np.abs(a.width[mask] - np.interp(t, b.t, b.width))
    fidelity_t, fidelity = fidelity_series(a, b)
    return ComparisonReport(
        t=t,
        max_dx=float(dx.max()),
        max_dwidth=float(dwidth.max()),
        fidelity=fidelity,
        fidelity_t=fidelity_t,
    )


def export_trajectory_csv(path, trajectory: Trajectory) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{TRAJECTORY_HEADER} representation={trajectory.representation}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in zip(trajectory.t, trajectory.mean_x, trajectory.width, trajectory.norm, trajectory.residual):
            writer.writerow([f"{value:.12g}" for value in row])
    return path


def load_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(TRAJECTORY_HEADER):
            raise ValueError(f"{path} is not a trajectory file")
        representation = header.split("representation=")[-1] if "representation=" in header else "grid"
        rows = list(csv.DictReader(fh))
    columns = {name: np.array([float(row[name]) for row in rows]) for name in TRAJECTORY_COLUMNS}
    return Trajectory(representation, columns["t"], columns["mean_x"], columns["width"], columns["norm"], columns["residual"])


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_summary_json(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(_plain(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_report(path, report: dict) -> Path:
    """Flat ``key = value`` text, nested keys joined with dots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []

    def walk(prefix, value):
        if isinstance(value, dict):
            for key in sorted(value):
                walk(f"{prefix}.{key}" if prefix else str(key), value[key])
        else:
            lines.append(f"{prefix} = {json.dumps(_plain(value))}")

    walk("", report)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
