"""Reduced dynamics on the Wannier-Stark ladder.

Three levels of description live here: the exact coupled equations for the
ladder amplitudes c_n, the secular models obtained from their Bessel
expansion near a resonance omega = q*omega_B, and the continuum envelope
theory with its Gaussian closed form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import splu
from scipy.special import jv

from modules.Basis import CouplingTable, WSBasis
from modules.Errors import NoResonanceError, NormDriftError, QuadratureError, TruncationError, WallContactError
from modules.Lattice import LatticeParams
from modules.Observables import Trajectory, site_moments, wss_mean_position
from modules.Propagator import ModulationSpec

logger = logging.getLogger(__name__)

NORM_TOL = 1e-9
EDGE_TOL = 1e-6
SECULAR_WINDOW = 0.25  # in units of omega_B
MAX_DETUNING = 0.2  # in units of omega_B
REPRESENTATIONS = ("bare", "interaction")


@dataclass(frozen=True)
class TightBindingState:
    sites: np.ndarray = field(repr=False)
    amplitudes: np.ndarray = field(repr=False)
    representation: str = "bare"
    t: float = 0.0
    k0: Optional[float] = None

    def __post_init__(self) -> None:
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        if len(self.sites) != len(self.amplitudes):
            raise ValueError("one amplitude per site is required")

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))


@dataclass(frozen=True)
class TightBindingLattice:
    """Ideal ladder E_n = E_ref + n*omega_B, X_nn = X00 + n*d on a long open chain."""

    params: LatticeParams
    X: CouplingTable
    energy_offset: float
    sites: np.ndarray = field(repr=False)

    @classmethod
    def from_basis(cls, basis: WSBasis, n_sites: int = 512) -> "TightBindingLattice":
        if basis.X is None:
            raise ValueError("basis has no coupling table; run coupling_matrix first")
        sites = np.arange(-(n_sites // 2), n_sites - n_sites // 2)
        return cls(basis.params, basis.X, basis.energy_offset, sites)

    @property
    def energies(self) -> np.ndarray:
        return self.energy_offset + self.sites * self.params.omega_B

    @property
    def diagonal(self) -> np.ndarray:
        return self.X.diagonal(self.sites)

    def embed(self, sites, amplitudes, representation: str = "bare", t: float = 0.0) -> TightBindingState:
        """Place amplitudes given on a few sites onto the full chain."""
        out = np.zeros(len(self.sites), dtype=complex)
        idx = np.asarray(sites) - self.sites[0]
        if idx.min() < 0 or idx.max() >= len(self.sites):
            raise ValueError("amplitudes fall outside the tight-binding chain")
        out[idx] = amplitudes
        return TightBindingState(self.sites.copy(), out, representation, t)

    def phases(self, mod: ModulationSpec, t: float) -> np.ndarray:
        """phi_n(t) = -E_n t - F0 X_nn cos(wt)/w."""
        return _phases_on(self.sites, self, mod, t)


@dataclass(frozen=True)
class SecularTerm:
    p: int
    l: int
    s: int
    coefficient: complex
    frequency: float


@dataclass(frozen=True)
class SecularModel:
    q: int
    omega: float
    omega_B: float
    F0: float
    terms: Tuple[SecularTerm, ...]

    @property
    def delta(self) -> float:
        return self.omega - self.q * self.omega_B

    @property
    def p_values(self) -> List[int]:
        return sorted({term.p for term in self.terms})

    def coupling(self, p: int) -> Tuple[complex, float]:
        """Summed coefficient and common frequency of the retained terms with hop p."""
        members = [term for term in self.terms if term.p == p]
        if not members:
            return 0j, 0.0
        return complex(sum(term.coefficient for term in members)), members[0].frequency

    @property
    def rate(self) -> float:
        """Effective rate Omega_q of the dominant |p| = q hop."""
        return float(np.real(self.coupling(self.q)[0]))

    def leading(self) -> "SecularModel":
        return replace(self, terms=tuple(term for term in self.terms if abs(term.p) == self.q))

    def dump(self) -> str:
        lines = [
            f"q = {self.q}",
            f"omega = {self.omega:.10g}",
            f"omega_B = {self.omega_B:.10g}",
            f"delta = {self.delta:.10g}",
            f"F0 = {self.F0:.10g}",
            f"rate = {self.rate:.10g}",
            "# p l s Re(coefficient) Im(coefficient) frequency",
        ]
        for term in self.terms:
            lines.append(
                f"{term.p} {term.l} {term.s} {term.coefficient.real:.10g} {term.coefficient.imag:.10g} {term.frequency:.10g}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EnvelopeSolution:
    k0: float
    t: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    v_g: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    x_shift: np.ndarray = field(repr=False)
    Delta: np.ndarray = field(repr=False)
    a0: float = 1.0
    x_start: float = 0.0

    @property
    def a(self) -> np.ndarray:
        return gaussian_width(self.a0, self.Delta)

    @property
    def mean_x(self) -> np.ndarray:
        # the envelope obeys f_t = v_g f_x + ..., so its centre moves against v_g
        return self.x_start - self.x_shift

    @property
    def rms_width(self) -> np.ndarray:
        return self.a / 2

    def to_trajectory(self) -> Trajectory:
        return Trajectory("envelope", self.t, self.mean_x, self.rms_width, np.ones_like(self.t))


def bessel_j(order, z):
    """J_l(z) for any integer order and real argument."""
    order = np.asarray(order)
    z = np.asarray(z, dtype=float)
    sign = np.where(order < 0, (-1.0) ** np.abs(order), 1.0) * np.where(z < 0, (-1.0) ** np.abs(order), 1.0)
    return sign * jv(np.abs(order), np.abs(z))


def bare_wavenumber(k0: float, mod: ModulationSpec) -> float:
    """Site phase of c_n at t=0 for slow amplitudes d_n ~ exp(i k0 d n)."""
    if not mod.active:
        return k0
    return k0 - mod.F0 / mod.omega


def to_interaction_picture(state: TightBindingState, lattice: TightBindingLattice, mod: ModulationSpec, t: Optional[float] = None) -> TightBindingState:
    if state.representation != "bare":
        raise ValueError("state is already in the interaction picture")
    t = state.t if t is None else t
    d = state.amplitudes * np.exp(-1j * _phases_on(state.sites, lattice, mod, t))
    return replace(state, amplitudes=d, representation="interaction", t=t)


def from_interaction_picture(state: TightBindingState, lattice: TightBindingLattice, mod: ModulationSpec, t: Optional[float] = None) -> TightBindingState:
    if state.representation != "interaction":
        raise ValueError("state is already bare")
    t = state.t if t is None else t
    c = state.amplitudes * np.exp(1j * _phases_on(state.sites, lattice, mod, t))
    return replace(state, amplitudes=c, representation="bare", t=t)


def _phases_on(sites, lattice: TightBindingLattice, mod: ModulationSpec, t: float) -> np.ndarray:
    sites = np.asarray(sites, dtype=float)
    phi = -(lattice.energy_offset + sites * lattice.params.omega_B) * t
    if mod.active:
        phi = phi - mod.F0 * lattice.X.diagonal(sites) * math.cos(mod.omega * t) / mod.omega
    return phi


def _hop(values: np.ndarray, p: int) -> np.ndarray:
    """out[n] = values[n + p] on an open chain."""
    out = np.zeros_like(values)
    if p > 0:
        out[:-p] = values[p:]
    elif p < 0:
        out[-p:] = values[:p]
    else:
        out[:] = values
    return out


def _rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + dt / 2, y + dt / 2 * k1)
    k3 = rhs(t + dt / 2, y + dt / 2 * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate(rhs, d0: np.ndarray, t0: float, t_end: float, dt: float, sample_every: int, on_sample, edge: int, label: str) -> int:
    duration = t_end - t0
    if duration <= 0:
        raise ValueError(f"t_end {t_end} must lie after the start time {t0}")
    if dt <= 0 or sample_every < 1:
        raise ValueError("dt must be positive and sample_every at least 1")
    steps = max(1, int(math.ceil(duration / dt - 1e-6)))
    dt = duration / steps
    norm0 = float(np.sum(np.abs(d0) ** 2))
    d = d0.astype(complex)

    def check(step: int) -> None:
        t = t0 + step * dt
        drift = abs(float(np.sum(np.abs(d) ** 2)) - norm0)
        if drift > NORM_TOL:
            raise NormDriftError(f"{label}: norm drifted by {drift:.2e} at t={t:.4f}; reduce the step {dt:.2e}")
        edge_mass = float(np.sum(np.abs(d[:edge]) ** 2) + np.sum(np.abs(d[-edge:]) ** 2))
        if edge_mass > EDGE_TOL:
            raise WallContactError(f"{label}: amplitude reached the chain ends at t={t:.4f} ({edge_mass:.2e})")
        on_sample(t, d)

    check(0)
    for step in range(1, steps + 1):
        d = _rk4_step(rhs, t0 + (step - 1) * dt, d, dt)
        if step % sample_every == 0 or step == steps:
            check(step)
    return steps


def _collect(representation: str, sites, samples, X: Optional[CouplingTable], d_len: float, meta: dict) -> Trajectory:
    t = np.array([s[0] for s in samples])
    coefficients = np.array([s[1] for s in samples])
    norm = np.sum(np.abs(coefficients) ** 2, axis=1)
    if X is not None:
        mean_x = np.array([wss_mean_position(sites, c, X) for c in coefficients])
    else:
        mean_x = site_moments(sites, coefficients, d_len)[0]
    spread = site_moments(sites, coefficients, d_len)[1]
    return Trajectory(representation, t, mean_x, spread, norm, sites=np.asarray(sites).copy(), coefficients=coefficients, meta=meta)


def integrate_cn(
    initial: TightBindingState,
    lattice: TightBindingLattice,
    mod: ModulationSpec,
    t_end: float,
    dt: float = 0.005,
    sample_every: int = 20,
) -> Trajectory:
    """Exact tight-binding flow c_n' = -i E_n c_n + i F0 sin(wt) sum_m X_nm c_m.

    Integrated in the interaction picture, where for the ideal ladder the hop p
    carries the phase -p*(omega_B t + F0 d cos(wt)/w).
    """
    if initial.representation == "bare":
        initial = to_interaction_picture(initial, lattice, mod)
    if len(initial.sites) != len(lattice.sites) or np.any(initial.sites != lattice.sites):
        raise ValueError("initial state must live on the lattice's sites; use lattice.embed")
    X, params = lattice.X, lattice.params
    hops = [p for p in range(-X.p_max, X.p_max + 1) if p != 0]
    z = mod.F0 * params.d / mod.omega if mod.active else 0.0

    def rhs(t, d):
        if not mod.active:
            return np.zeros_like(d)
        theta = params.omega_B * t + z * math.cos(mod.omega * t)
        out = np.zeros_like(d)
        for p in hops:
            out += X.X_p(p) * np.exp(-1j * p * theta) * _hop(d, p)
        return 1j * mod.F0 * math.sin(mod.omega * t) * out

    samples = []

    def on_sample(t, d):
        samples.append((t, d * np.exp(1j * lattice.phases(mod, t))))

    logger.info(f"Integrating c_n on {len(lattice.sites)} sites to t={t_end:.4g} (dt={dt:.1e})")
    steps = _integrate(rhs, initial.amplitudes, initial.t, t_end, dt, sample_every, on_sample, X.p_max, "integrate_cn")
    return _collect("tight-binding", lattice.sites, samples, X, params.d, {"steps": steps, "dt": dt})


def bessel_expansion_terms(p: int, F0: float, omega: float, l_max: int, d: float = 1.0) -> List[Tuple[int, complex]]:
    """Terms (l, (-i)^l J_l(z)) of exp(-i z cos wt) = sum_l (-i)^l J_l(z) exp(i l w t), z = p F0 d / w."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    z = p * F0 * d / omega
    needed = math.ceil(abs(z)) + 4
    if l_max < needed:
        raise TruncationError(f"l_max={l_max} truncates the expansion at z={z:.4g}; need at least {needed}")
    return [(l, complex((-1j) ** l * bessel_j(l, z))) for l in range(-l_max, l_max + 1)]


def bessel_partial_sum(terms: List[Tuple[int, complex]], omega: float, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return sum(coefficient * np.exp(1j * l * omega * t) for l, coefficient in terms)


def secular_reduce(params: LatticeParams, mod: ModulationSpec, X: CouplingTable, q: int, l_max: Optional[int] = None, window: float = SECULAR_WINDOW) -> SecularModel:
    if q < 1:
        raise ValueError("resonance order q must be a positive integer")
    if not mod.active:
        raise NoResonanceError("An unmodulated lattice has no secular couplings")
    omega_B = params.omega_B
    if abs(mod.omega - q * omega_B) > MAX_DETUNING * omega_B:
        raise NoResonanceError(f"omega={mod.omega:.4g} is too far from {q}*omega_B={q * omega_B:.4g}")
    if l_max is None:
        l_max = math.ceil(X.p_max * mod.F0 * params.d / mod.omega) + 6

    terms = []
    for p in [p for p in range(-X.p_max, X.p_max + 1) if p != 0]:
        for l, coefficient in bessel_expansion_terms(p, mod.F0, mod.omega, l_max, params.d):
            for s in (1, -1):
                frequency = (l + s) * mod.omega - p * omega_B
                if abs(frequency) <= window * omega_B:
                    terms.append(SecularTerm(p, l, s, s * mod.F0 / 2 * X.X_p(p) * coefficient, frequency))
    if not terms:
        raise NoResonanceError(f"No secular terms within {window}*omega_B of resonance")
    model = SecularModel(q, mod.omega, omega_B, mod.F0, tuple(terms))
    logger.info(f"Secular model q={q}: {len(terms)} terms, rate {model.rate:.6g}, detuning {model.delta:.4g}")
    return model


def rabi_frequency(q: int, F0: float, omega_B: float, X_q: float, d: float = 1.0) -> float:
    if q not in (1, 2):
        raise ValueError(f"Rabi frequency is defined for q = 1 or 2, got {q}")
    return omega_B / d * X_q * float(bessel_j(1, F0 * d / omega_B))


def integrate_dn_resonant(
    initial: TightBindingState,
    model: SecularModel,
    t_end: float,
    dt: float = 0.01,
    lattice: Optional[TightBindingLattice] = None,
    mod: Optional[ModulationSpec] = None,
    sample_every: int = 10,
) -> Trajectory:
    """Evolve d_n' = sum_p kappa_p exp(i nu_p t) d_{n+p} with the retained secular terms.

    With a ``lattice`` and ``mod`` the samples are mapped back to bare c_n.
    """
    if initial.representation == "bare":
        if lattice is None or mod is None:
            raise ValueError("a bare initial state needs the lattice and modulation to convert")
        initial = to_interaction_picture(initial, lattice, mod)
    couplings = [(p,) + model.coupling(p) for p in model.p_values]

    def rhs(t, d):
        out = np.zeros_like(d)
        for p, kappa, nu in couplings:
            out += kappa * np.exp(1j * nu * t) * _hop(d, p)
        return out

    sites = initial.sites
    samples = []

    def on_sample(t, d):
        if lattice is not None and mod is not None:
            samples.append((t, d * np.exp(1j * _phases_on(sites, lattice, mod, t))))
        else:
            samples.append((t, d.copy()))

    edge = max(abs(p) for p in model.p_values)
    steps = _integrate(rhs, initial.amplitudes, initial.t, t_end, dt, sample_every, on_sample, edge, "integrate_dn_resonant")
    X = lattice.X if lattice is not None and mod is not None else None
    return _collect("secular", sites, samples, X, 1.0, {"steps": steps, "dt": dt, "q": model.q})


def dispersion_and_vg(k0: float, model: SecularModel, d: float = 1.0) -> Tuple[float, float]:
    """Plane-wave frequency and group velocity of the resonant model."""
    if model.q not in (1, 2):
        raise ValueError(f"dispersion is defined for q = 1 or 2, got {model.q}")
    q, rate = model.q, model.rate
    return 2 * rate * math.sin(q * k0 * d), 2 * q * rate * d * math.cos(q * k0 * d)


def theta(t, params: LatticeParams, mod: ModulationSpec):
    t = np.asarray(t, dtype=float)
    if not mod.active:
        return params.omega_B * t
    return params.omega_B * t + mod.F0 * params.d / mod.omega * np.cos(mod.omega * t)


def envelope_rates(t, k0: float, X: CouplingTable, params: LatticeParams, mod: ModulationSpec):
    """Drift velocity v_g(t) and diffusion coefficient D(t) of the continuum envelope."""
    t = np.asarray(t, dtype=float)
    d = params.d
    phase = theta(t, params, mod) - k0 * d
    drive = np.sin(mod.omega * t) if mod.active else np.zeros_like(t)
    v_g = np.zeros_like(t)
    D = np.zeros_like(t)
    for p in range(1, X.p_max + 1):
        v_g = v_g + p * X.X_p(p) * np.sin(p * phase)
        D = D + p ** 2 * X.X_p(p) * np.cos(p * phase)
    return 2 * mod.F0 * d * v_g * drive, mod.F0 * d ** 2 * D * drive


def envelope_general(
    k0: float,
    X: CouplingTable,
    params: LatticeParams,
    mod: ModulationSpec,
    t_end: float,
    a0: float = 10.0,
    x_start: float = 0.0,
    samples: int = 2001,
) -> EnvelopeSolution:
    if X.p_max < 2:
        raise ValueError("the envelope theory needs couplings up to p_max >= 2")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    t_eval = np.linspace(0.0, t_end, samples)

    def rhs(t, y):
        v_g, D = envelope_rates(t, k0, X, params, mod)
        return [float(v_g), float(D)]

    max_step = 0.05 * 2 * math.pi / mod.omega if mod.active else np.inf
    result = solve_ivp(rhs, (0.0, t_end), [0.0, 0.0], method="DOP853", t_eval=t_eval, rtol=1e-10, atol=1e-12, max_step=max_step)
    if not result.success:
        raise QuadratureError(f"Envelope quadrature failed: {result.message}")
    v_g, D = envelope_rates(t_eval, k0, X, params, mod)
    return EnvelopeSolution(
        k0=k0,
        t=t_eval,
        theta=theta(t_eval, params, mod),
        v_g=v_g,
        D=D,
        x_shift=result.y[0],
        Delta=result.y[1],
        a0=a0,
        x_start=x_start,
    )


def detuned_leading_order(k0: float, rate: float, delta: float, t, d: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form x'(t) and Delta(t) to leading order in 1/delta."""
    t = np.asarray(t, dtype=float)
    x_shift = 2 * rate * d / delta * (np.sin(k0 * d + delta * t) - math.sin(k0 * d))
    Delta = -rate * d ** 2 / delta * (np.cos(k0 * d + delta * t) - math.cos(k0 * d))
    return x_shift, Delta


def gaussian_width(a0: float, Delta):
    if a0 <= 0:
        raise ValueError("initial width a0 must be positive")
    return a0 * np.sqrt(1 + 16 * np.asarray(Delta) ** 2 / a0 ** 4)


def envelope_density(x, solution: EnvelopeSolution, index: int) -> np.ndarray:
    """|f(x,t)|^2 of the Gaussian envelope at sample ``index``."""
    a = solution.a[index]
    centre = solution.mean_x[index]
    return solution.a0 / a * np.exp(-2 * (np.asarray(x, dtype=float) - centre) ** 2 / a ** 2)


def integrate_envelope_pde(
    x: np.ndarray,
    f0: np.ndarray,
    k0: float,
    X: CouplingTable,
    params: LatticeParams,
    mod: ModulationSpec,
    t_end: float,
    dt: float,
    sample_every: int = 10,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Crank-Nicolson solution of f_t = v_g(t) f_x + i D(t) f_xx with f = 0 at the ends.

    Returns sample times, centroids and RMS widths of |f|^2.
    """
    x = np.asarray(x, dtype=float)
    dx = x[1] - x[0]
    size = len(x)
    ones = np.ones(size - 1)
    first = sparse.diags([ones, -ones], [1, -1], format="csc") / (2 * dx)
    second = sparse.diags([ones, -2 * np.ones(size), ones], [1, 0, -1], format="csc") / dx ** 2
    identity = sparse.identity(size, format="csc", dtype=complex)
    f = np.asarray(f0, dtype=complex)
    steps = max(1, int(math.ceil(t_end / dt - 1e-6)))
    dt = t_end / steps

    def moments(values):
        rho = np.abs(values) ** 2
        total = rho.sum()
        mean = np.dot(x, rho) / total
        return mean, math.sqrt(max(np.dot((x - mean) ** 2, rho) / total, 0.0))

    times, means, widths = [0.0], [], []
    mean, spread = moments(f)
    means.append(mean)
    widths.append(spread)
    for step in range(1, steps + 1):
        v_g, D = envelope_rates((step - 0.5) * dt, k0, X, params, mod)
        generator = float(v_g) * first + 1j * float(D) * second
        lhs = splu((identity - 0.5 * dt * generator).tocsc())
        f = lhs.solve((identity + 0.5 * dt * generator) @ f)
        if step % sample_every == 0 or step == steps:
            mean, spread = moments(f)
            times.append(step * dt)
            means.append(mean)
            widths.append(spread)
    return np.array(times), np.array(means), np.array(widths)
