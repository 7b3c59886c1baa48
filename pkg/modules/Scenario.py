"""Scenario files, presets and the run pipeline (basis, initial state, engines, analysis)."""

from __future__ import annotations

import configparser
import hashlib
import itertools
import logging
import math
import re
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.Basis import (
    WSBasis,
    build_basis,
    export_couplings_json,
    export_energies_csv,
    export_states_csv,
    solve_eigenproblem,
)
from modules.Errors import ConfigError, FitError, NoResonanceError, WannierStarkError
from modules.Lattice import GridSpec, LatticeParams, build_potential, export_potential_csv
from modules.Observables import (
    Trajectory,
    compare_trajectories,
    export_trajectory_csv,
    fit_group_velocity,
    fit_oscillation,
    harmonic_amplitudes,
    mean_position,
    period_average,
    site_moments,
    sublattice_centroids,
    write_report,
    write_summary_json,
)
from modules.Propagator import (
    ModulationSpec,
    export_snapshot_csv,
    frame_transform,
    propagate,
    wavepacket_from_coefficients,
)
from modules.TightBinding import (
    TightBindingLattice,
    bare_wavenumber,
    dispersion_and_vg,
    envelope_general,
    integrate_cn,
    integrate_dn_resonant,
    rabi_frequency,
    secular_reduce,
)

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent.parent / "config" / "presets"
PRESET_ORDER = [
    "fig1-basis",
    "fig2-quadrature",
    "fig3-inphase",
    "fig4-harmonic",
    "fig5-6-detuned",
    "bloch-undriven",
]
PRESET_ALIASES = {
    "fig1": "fig1-basis",
    "fig2": "fig2-quadrature",
    "fig3": "fig3-inphase",
    "fig4": "fig4-harmonic",
    "fig5": "fig5-6-detuned",
    "fig6": "fig5-6-detuned",
    "fig5/6-detuned": "fig5-6-detuned",
    "bloch": "bloch-undriven",
}

ENGINES = ("full", "tight-binding", "secular", "envelope")
MODULATION_KINDS = ("none", "phase", "force")
ENVELOPES = ("gaussian", "single-site", "sublattice-pair")
LENGTH_UNITS = ("bloch", "beat", "time")
K0_FRAMES = ("interaction", "bare")
FRAMES = ("accelerated", "lab")
CHECK_KEYS = (
    "ladder_spacing",
    "ladder_tol",
    "x1",
    "x1_tol",
    "frequency",
    "frequency_rtol",
    "amplitude",
    "amplitude_rtol",
    "quoted_amplitude",
    "speed",
    "speed_tol",
    "theory_speed_rtol",
    "max_drift",
    "min_width_growth",
    "width_law_rtol",
    "split_speed_rtol",
    "min_fidelity_tb",
    "min_fidelity_secular",
)
REQUIRED = object()
FIDELITY_WINDOW = 2  # Bloch periods
NUMERICS_KEYS = ("n_sites", "points_per_site", "dt", "p_max", "tb_sites", "tb_dt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENGINE = 3
EXIT_CHECK = 4


@dataclass(frozen=True)
class NumericsDefaults:
    dt: float = 1e-3
    points_per_site: int = 32
    n_sites: int = 64
    p_max: int = 3
    tb_sites: int = 512
    tb_dt: float = 0.005


# (section, key) -> (attribute, kind, default); NUMERICS_KEYS default to NumericsDefaults
SCHEMA: Dict[Tuple[str, str], Tuple[str, str, object]] = {
    ("scenario", "name"): ("name", "str", ""),
    ("scenario", "description"): ("description", "str", ""),
    ("scenario", "engines"): ("engines", "engines", ("full",)),
    ("scenario", "seed"): ("seed", "int", 0),
    ("lattice", "v0"): ("v0", "float", REQUIRED),
    ("lattice", "f"): ("f", "float", REQUIRED),
    ("grid", "n_sites"): ("n_sites", "int", None),
    ("grid", "points_per_site"): ("points_per_site", "int", None),
    ("modulation", "kind"): ("kind", "str", REQUIRED),
    ("modulation", "a"): ("a", "float", 0.0),
    ("modulation", "omega"): ("omega", "float", None),
    ("modulation", "detuning"): ("detuning", "float", None),
    ("modulation", "resonance"): ("resonance", "int", 1),
    ("packet", "envelope"): ("envelope", "str", REQUIRED),
    ("packet", "width"): ("width", "float", 3.0),
    ("packet", "center"): ("center", "float", 0.0),
    ("packet", "k0"): ("k0", "float", 0.0),
    ("packet", "k0_frame"): ("k0_frame", "str", "interaction"),
    ("run", "length"): ("length", "float", REQUIRED),
    ("run", "length_unit"): ("length_unit", "str", "bloch"),
    ("run", "dt"): ("dt", "float", None),
    ("run", "sample_every"): ("sample_every", "int", 100),
    ("run", "snapshot_times"): ("snapshot_times", "floats", ()),
    ("run", "p_max"): ("p_max", "int", None),
    ("run", "tb_sites"): ("tb_sites", "int", None),
    ("run", "tb_dt"): ("tb_dt", "float", None),
    ("run", "frame"): ("frame", "str", "accelerated"),
}
SECTION_ORDER = ["scenario", "lattice", "grid", "modulation", "packet", "run", "check"]


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    description: str
    engines: Tuple[str, ...]
    seed: int
    v0: float
    f: float
    n_sites: int
    points_per_site: int
    kind: str
    a: float
    omega: Optional[float]
    detuning: Optional[float]
    resonance: int
    envelope: str
    width: float
    center: float
    k0: float
    k0_frame: str
    length: float
    length_unit: str
    dt: float
    sample_every: int
    snapshot_times: Tuple[float, ...]
    p_max: int
    tb_sites: int
    tb_dt: float
    frame: str
    checks: Tuple[Tuple[str, float], ...] = ()

    @property
    def omega_B(self) -> float:
        return self.f * 1.0

    @property
    def omega_value(self) -> float:
        if self.kind == "none":
            return 0.0
        if self.omega is not None:
            return self.omega
        return self.resonance * self.omega_B + self.detuning

    @property
    def delta(self) -> float:
        return self.omega_value - self.resonance * self.omega_B

    @property
    def params(self) -> LatticeParams:
        return LatticeParams(self.v0, self.f, self.a if self.kind != "none" else 0.0, self.omega_value)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.n_sites, self.points_per_site)

    @property
    def modulation(self) -> ModulationSpec:
        return ModulationSpec(self.kind, self.a if self.kind != "none" else 0.0, self.omega_value)

    @property
    def bloch_period(self) -> float:
        return 2 * math.pi / self.omega_B

    @property
    def sample_interval(self) -> float:
        return self.sample_every * self.dt

    @property
    def t_end(self) -> float:
        """Run length rounded up to whole sample intervals, so every engine samples the same times."""
        if self.length_unit == "bloch":
            raw = self.length * self.bloch_period
        elif self.length_unit == "beat":
            raw = self.length * 2 * math.pi / abs(self.delta)
        else:
            raw = self.length
        return math.ceil(raw / self.sample_interval - 1e-9) * self.sample_interval

    @property
    def tb_sample_every(self) -> int:
        return max(1, int(round(self.sample_interval / self.tb_dt)))

    @property
    def k0_interaction(self) -> float:
        if self.k0_frame == "interaction" or not self.modulation.active:
            return self.k0
        return self.k0 + self.modulation.F0 / self.omega_value

    @property
    def k0_bare(self) -> float:
        if self.k0_frame == "bare":
            return self.k0
        return bare_wavenumber(self.k0, self.modulation)

    @property
    def check_targets(self) -> Dict[str, float]:
        return dict(self.checks)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: Optional[float]
    target: str

    def as_dict(self) -> dict:
        return {"passed": self.passed, "value": self.value, "target": self.target}


@dataclass
class RunResult:
    status: int
    out_dir: Path
    summary: dict = field(default_factory=dict)
    checks: List[CheckResult] = field(default_factory=list)


def _line_index(text: str) -> Dict[Tuple[str, str], int]:
    """Line numbers of sections (key '') and options in an INI document."""
    lines = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped[0] in "#;":
            continue
        header = re.match(r"^\[([^\]]+)\]", stripped)
        if header:
            section = header.group(1).strip().lower()
            lines.setdefault((section, ""), number)
            continue
        option = re.match(r"^([^=:]+?)\s*[=:]", stripped)
        if option and section is not None:
            lines.setdefault((section, option.group(1).strip().lower()), number)
    return lines


def _convert(kind: str, raw: str, key: str, line: Optional[int]):
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if kind == "floats":
            return tuple(float(item) for item in raw.split(",") if item.strip())
        if kind == "engines":
            return tuple(item.strip() for item in raw.split(",") if item.strip())
    except ValueError:
        raise ConfigError(f"cannot read '{raw}' as {kind}", key=key, line=line) from None
    raise ValueError(f"unknown value kind {kind}")


def parse_config(text: str, defaults: Optional[NumericsDefaults] = None) -> ScenarioConfig:
    defaults = defaults or NumericsDefaults()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", line=line) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(e.message.split(":")[-1].strip() or "duplicate entry", line=e.lineno) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("option outside of any [section]", line=e.lineno) from None

    lines = _line_index(text)
    values = {}
    checks = {}
    for section in parser.sections():
        if section not in SECTION_ORDER:
            raise ConfigError(f"unknown section [{section}]", key=section, line=lines.get((section, "")))
        for key, raw in parser.items(section):
            name = f"{section}.{key}"
            line = lines.get((section, key))
            if section == "check":
                if key not in CHECK_KEYS:
                    raise ConfigError("unknown check", key=name, line=line)
                checks[key] = _convert("float", raw, name, line)
                continue
            if (section, key) not in SCHEMA:
                raise ConfigError("unknown key", key=name, line=line)
            attr, kind, _ = SCHEMA[(section, key)]
            values[attr] = _convert(kind, raw, name, line)

    missing = []
    for (section, key), (attr, _, default) in SCHEMA.items():
        if attr in values:
            continue
        if default is REQUIRED:
            missing.append(f"{section}.{key}")
        elif attr in NUMERICS_KEYS:
            values[attr] = getattr(defaults, attr)
        else:
            values[attr] = default
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    config = ScenarioConfig(checks=tuple(sorted(checks.items())), **values)
    _validate(config, lines)
    return config


def _validate(config: ScenarioConfig, lines: Dict[Tuple[str, str], int]) -> None:
    def fail(message: str, section: str, key: str) -> None:
        raise ConfigError(message, key=f"{section}.{key}", line=lines.get((section, key)))

    for engine in config.engines:
        if engine not in ENGINES:
            fail(f"unknown engine '{engine}', expected {', '.join(ENGINES)}", "scenario", "engines")
    if config.v0 <= 0:
        fail("must be positive", "lattice", "v0")
    if config.f < 0:
        fail("must be non-negative", "lattice", "f")
    if config.f == 0 and config.engines:
        fail("dynamics need a tilt f > 0", "lattice", "f")
    if config.n_sites < 16 or config.n_sites % 2:
        fail("must be an even number of at least 16", "grid", "n_sites")
    if config.points_per_site < 8:
        fail("must be at least 8", "grid", "points_per_site")
    if config.kind not in MODULATION_KINDS:
        fail(f"must be one of {', '.join(MODULATION_KINDS)}", "modulation", "kind")
    if config.a < 0:
        fail("must be non-negative", "modulation", "a")
    if config.resonance < 1:
        fail("must be a positive integer", "modulation", "resonance")
    if config.kind == "none":
        if config.a != 0 or config.omega is not None or config.detuning is not None:
            fail("an unmodulated lattice takes no a, omega or detuning", "modulation", "kind")
        if any(engine in ("secular", "envelope") for engine in config.engines):
            fail("secular and envelope engines need a modulated lattice", "scenario", "engines")
    else:
        if config.a == 0:
            fail("must be positive for a modulated lattice", "modulation", "a")
        if (config.omega is None) == (config.detuning is None):
            fail("give exactly one of omega and detuning", "modulation", "omega")
        if config.omega_value <= 0:
            fail("modulation frequency must be positive", "modulation", "omega" if config.omega is not None else "detuning")
    if config.envelope not in ENVELOPES:
        fail(f"must be one of {', '.join(ENVELOPES)}", "packet", "envelope")
    if config.width <= 0:
        fail("must be positive", "packet", "width")
    if not -config.n_sites / 2 <= config.center < config.n_sites / 2:
        fail("must lie inside the box", "packet", "center")
    if config.k0_frame not in K0_FRAMES:
        fail(f"must be one of {', '.join(K0_FRAMES)}", "packet", "k0_frame")
    if "envelope" in config.engines and config.envelope != "gaussian":
        fail("the envelope engine needs a gaussian packet", "scenario", "engines")
    if config.length <= 0:
        fail("must be positive", "run", "length")
    if config.length_unit not in LENGTH_UNITS:
        fail(f"must be one of {', '.join(LENGTH_UNITS)}", "run", "length_unit")
    if config.length_unit == "beat" and (config.kind == "none" or abs(config.delta) < 1e-12):
        fail("beat periods need a detuned modulation", "run", "length_unit")
    if config.length_unit == "bloch" and config.f == 0:
        fail("Bloch periods need f > 0", "run", "length_unit")
    if config.dt <= 0:
        fail("must be positive", "run", "dt")
    if config.sample_every < 1:
        fail("must be at least 1", "run", "sample_every")
    if any(t < 0 for t in config.snapshot_times):
        fail("must be non-negative", "run", "snapshot_times")
    if config.p_max < 1 or config.p_max >= config.n_sites // 4:
        fail("must be between 1 and a quarter of the box", "run", "p_max")
    if "envelope" in config.engines and config.p_max < 2:
        fail("the envelope engine needs p_max >= 2", "run", "p_max")
    if config.tb_sites < 2 * config.n_sites:
        fail("must be at least twice the box size", "run", "tb_sites")
    if config.tb_dt <= 0:
        fail("must be positive", "run", "tb_dt")
    ratio = config.sample_interval / config.tb_dt
    if {"tight-binding", "secular"} & set(config.engines) and abs(ratio - round(ratio)) > 1e-6 * ratio:
        fail("must divide the sample interval dt*sample_every", "run", "tb_dt")
    if config.frame not in FRAMES:
        fail(f"must be one of {', '.join(FRAMES)}", "run", "frame")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: ScenarioConfig) -> str:
    sections: Dict[str, List[str]] = {name: [] for name in SECTION_ORDER}
    for (section, key), (attr, _, _) in SCHEMA.items():
        value = getattr(config, attr)
        if value is None:
            continue
        sections[section].append(f"{key} = {_format(value)}")
    for key, value in config.checks:
        sections["check"].append(f"{key} = {_format(value)}")
    blocks = [f"[{name}]\n" + "\n".join(body) + "\n" for name, body in sections.items() if body]
    return "\n".join(blocks)


def config_signature(config: ScenarioConfig) -> str:
    return hashlib.sha1(serialize(config).encode("utf-8")).hexdigest()


def with_overrides(config: ScenarioConfig, overrides: Dict[str, str], defaults: Optional[NumericsDefaults] = None) -> ScenarioConfig:
    """Re-parse the config with ``section.key = value`` overrides applied."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(serialize(config))
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError("override must name section.key", key=dotted)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser.items(section))
        lines.append("")
    return parse_config("\n".join(lines), defaults)


def expand_sweep(config: ScenarioConfig, vary: Sequence[str], defaults: Optional[NumericsDefaults] = None) -> List[Tuple[str, ScenarioConfig]]:
    """Cartesian product of ``section.key=v1,v2`` specifications, keyed by their values."""
    axes = []
    for spec in vary:
        dotted, sep, raw = spec.partition("=")
        if not sep or not raw.strip():
            raise ConfigError(f"sweep axis '{spec}' must look like section.key=v1,v2", key=dotted.strip() or None)
        axes.append((dotted.strip(), [item.strip() for item in raw.split(",") if item.strip()]))
    if not axes:
        return [(config.name or "scenario", config)]
    out = []
    for combo in itertools.product(*[values for _, values in axes]):
        overrides = {dotted: value for (dotted, _), value in zip(axes, combo)}
        key = "_".join(f"{dotted.split('.')[-1]}={value}" for dotted, value in overrides.items())
        out.append((key, with_overrides(config, overrides, defaults)))
    return out


def resolve_preset(name: str) -> str:
    name = name.strip()
    if name in PRESET_ORDER:
        return name
    if name in PRESET_ALIASES:
        return PRESET_ALIASES[name]
    raise ConfigError(f"unknown preset '{name}', expected one of {', '.join(PRESET_ORDER)}", key=name)


def preset_path(name: str) -> Path:
    return PRESET_DIR / f"{resolve_preset(name)}.ini"


def load_preset(name: str, defaults: Optional[NumericsDefaults] = None) -> ScenarioConfig:
    return parse_config(preset_path(name).read_text(encoding="utf-8"), defaults)


def list_presets() -> List[Tuple[str, str]]:
    out = []
    for name in PRESET_ORDER:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.read(PRESET_DIR / f"{name}.ini", encoding="utf-8")
        out.append((name, parser.get("scenario", "description", fallback="")))
    return out


def initial_coefficients(config: ScenarioConfig, sites: np.ndarray) -> np.ndarray:
    """Ladder coefficients c_n(0) of the configured packet on ``sites``."""
    n = np.asarray(sites, dtype=float)
    phase = np.exp(1j * config.k0_bare * n)
    if config.envelope == "single-site":
        return (n == round(config.center)).astype(complex)
    profile = np.exp(-((n - config.center) ** 2) / (4 * config.width ** 2))
    if config.envelope == "gaussian":
        return profile * phase
    # odd sites in phase, even sites alternating every other site, equal weights
    odd = np.where(sites % 2 == 1, profile, 0.0)
    even = np.where(sites % 2 == 0, profile * np.exp(1j * math.pi / 2 * n), 0.0)
    odd = odd / np.linalg.norm(odd)
    even = even / np.linalg.norm(even)
    return (odd + even) / math.sqrt(2) * phase


def run_basis(config: ScenarioConfig, out_dir: Path) -> Tuple[Optional[WSBasis], dict]:
    """Solve the box, export the ladder and return it with its summary section."""
    out_dir = Path(out_dir)
    grid, params = config.grid, config.params
    export_potential_csv(out_dir / "potential.csv", build_potential(grid, params))
    if config.f == 0:
        spectrum = solve_eigenproblem(grid, params)
        with (out_dir / "spectrum.csv").open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("index,E\n")
            for index, energy in enumerate(spectrum.energies):
                fh.write(f"{index},{energy:.12g}\n")
        lowest = spectrum.energies[: grid.n_sites]
        return None, {"states": len(spectrum), "ground_band_width": float(np.ptp(lowest)), "max_residual": spectrum.max_residual}

    basis = build_basis(grid, params, p_max=config.p_max)
    export_energies_csv(out_dir / "energies.csv", basis)
    export_states_csv(out_dir / "states.csv", basis)
    export_couplings_json(out_dir / "couplings.json", basis)
    bulk = basis.energies[basis.bulk_slice()]
    summary = {
        "bulk_range": list(basis.bulk_range),
        "ladder_spacing": float(np.mean(np.diff(bulk))),
        "ladder_error": basis.ladder_error,
        "translation_error": basis.translation_error,
        "discarded_states": basis.discarded,
        "energy_offset": basis.energy_offset,
        "couplings": basis.X.as_dict(),
    }
    return basis, summary


def _full_engine(config, basis, packet, progress) -> Trajectory:
    params, mod = config.params, config.modulation
    kwargs = dict(
        t_end=config.t_end,
        dt=config.dt,
        sample_every=config.sample_every,
        snapshot_times=config.snapshot_times,
        progress=progress,
    )
    if config.frame == "accelerated" or not mod.active:
        return propagate(packet, params, mod, basis=basis, **kwargs)
    lab = frame_transform(packet, mod, 0.0, "accelerated->lab", params)
    trajectory = propagate(lab, params, ModulationSpec("phase", mod.a, mod.omega), **kwargs)
    # report positions in the co-moving frame so all engines share one coordinate
    shift = np.array([mod.X0(t) for t in trajectory.t])
    trajectory.mean_x = trajectory.mean_x - shift
    return trajectory


def _drift(trajectory: Trajectory, period: float) -> float:
    t_avg, x_avg = period_average(trajectory.t, trajectory.mean_x, period)
    if len(x_avg) >= 2:
        return float(x_avg[-1] - x_avg[0])
    return float(trajectory.mean_x[-1] - trajectory.mean_x[0])


def _site_width(trajectory: Trajectory) -> np.ndarray:
    if trajectory.coefficients is None:
        return trajectory.width
    return site_moments(trajectory.sites, trajectory.coefficients)[1]


def _analyse(config: ScenarioConfig, basis: WSBasis, trajectories: Dict[str, Trajectory], envelope=None) -> dict:
    mod = config.modulation
    period = config.bloch_period
    summary: Dict[str, dict] = {}
    theory: Dict[str, object] = {}

    model = None
    if mod.active:
        try:
            model = secular_reduce(config.params, mod, basis.X, config.resonance)
        except NoResonanceError as e:
            logger.warning(f"No secular model: {e}")
    if model is not None:
        q = config.resonance
        theory["rabi_frequency"] = rabi_frequency(q, mod.F0, config.omega_B, basis.X.X_p(q))
        theory["secular_rate"] = model.rate
        theory["detuning"] = model.delta
        if q in (1, 2):
            omega_k, v_g = dispersion_and_vg(config.k0_interaction, model)
            theory["dispersion"] = omega_k
            theory["group_velocity"] = v_g
            theory["centroid_velocity"] = -v_g
            theory["speed"] = abs(v_g)
            if q == 2:
                theory["split_speed"] = 4 * model.rate * 1.0
        if abs(model.delta) > 1e-12:
            theory["amplitude"] = 2 * abs(model.rate) / abs(model.delta)
            theory["beat_frequency"] = abs(model.delta)
    summary["theory"] = theory

    for engine, trajectory in trajectories.items():
        stats: Dict[str, object] = {
            "samples": len(trajectory),
            "t_end": float(trajectory.t[-1]),
            "mean_x_start": float(trajectory.mean_x[0]),
            "mean_x_end": float(trajectory.mean_x[-1]),
            "max_norm_drift": float(np.max(np.abs(trajectory.norm - trajectory.norm[0]))),
        }
        if np.any(np.isfinite(trajectory.residual)):
            stats["max_residual"] = float(np.nanmax(trajectory.residual))
        widths = _site_width(trajectory)
        stats["width_start"] = float(widths[0])
        stats["width_end"] = float(widths[-1])
        stats["width_growth"] = float(widths[-1] / widths[0])
        _, w_avg = period_average(trajectory.t, widths, period)
        stats["width_monotone"] = bool(len(w_avg) > 1 and np.all(np.diff(w_avg) >= -1e-9))
        stats["drift"] = _drift(trajectory, period)

        if not mod.active or abs(config.delta) > 1e-12:
            stats.update(_oscillation_stats(config, trajectory, widths))
        else:
            stats.update(_velocity_stats(config, trajectory, period))
        summary[engine] = stats

    if envelope is not None:
        summary["envelope_law"] = {
            "a0": envelope.a0,
            "final_a": float(envelope.a[-1]),
            "x_shift_end": float(envelope.x_shift[-1]),
            "delta_end": float(envelope.Delta[-1]),
        }
        reference = trajectories.get("full") or trajectories.get("tight-binding")
        if reference is not None:
            predicted = np.interp(reference.t, envelope.t, envelope.rms_width)
            deviation = np.abs(_site_width(reference) - predicted) / predicted
            summary["envelope_law"]["width_law_deviation"] = float(deviation.max())

    summary["comparison"] = _comparisons(trajectories, period)
    return summary


def _oscillation_stats(config: ScenarioConfig, trajectory: Trajectory, widths: np.ndarray) -> dict:
    stats: Dict[str, object] = {}
    detuned = config.modulation.active
    series_t, series_x = trajectory.t, trajectory.mean_x
    min_periods = 1.5 if detuned else 2.0
    try:
        fit = fit_oscillation(series_t, series_x, min_periods=min_periods)
        stats.update({"frequency": fit.frequency, "amplitude": fit.amplitude, "phase": fit.phase, "offset": fit.offset})
    except FitError as e:
        logger.warning(f"{trajectory.representation}: no oscillation fit ({e})")
        stats["fit_error"] = str(e)
    if detuned:
        t_avg, w_avg = period_average(trajectory.t, widths, config.bloch_period)
        try:
            width_fit = fit_oscillation(t_avg, w_avg, min_periods=min_periods)
            stats["width_frequency"] = width_fit.frequency
            stats["width_amplitude"] = width_fit.amplitude
        except FitError as e:
            logger.warning(f"{trajectory.representation}: no breathing fit ({e})")
    else:
        stats["harmonics"] = harmonic_amplitudes(series_t, series_x, config.omega_B, 4).tolist()
    return stats


def _velocity_stats(config: ScenarioConfig, trajectory: Trajectory, period: float) -> dict:
    stats: Dict[str, object] = {}
    try:
        fit = fit_group_velocity(trajectory.t, trajectory.mean_x, period=period)
        stats.update({"velocity": fit.slope, "speed": abs(fit.slope), "r_squared": fit.r_squared})
    except FitError as e:
        logger.warning(f"{trajectory.representation}: no velocity fit ({e})")
        stats["fit_error"] = str(e)
    if config.envelope == "sublattice-pair" and trajectory.coefficients is not None:
        tracks = sublattice_centroids(trajectory.sites, trajectory.coefficients)
        for name in ("odd", "even"):
            try:
                fit = fit_group_velocity(trajectory.t, tracks[f"{name}_centroid"], period=period)
                stats[f"{name}_velocity"] = fit.slope
            except FitError as e:
                stats[f"{name}_fit_error"] = str(e)
            stats[f"{name}_weight_end"] = float(tracks[f"{name}_weight"][-1])
    return stats


def _comparisons(trajectories: Dict[str, Trajectory], period: float) -> dict:
    out = {}
    for first, second in (("full", "tight-binding"), ("tight-binding", "secular"), ("full", "secular")):
        if first not in trajectories or second not in trajectories:
            continue
        report = compare_trajectories(trajectories[first], trajectories[second])
        entry = report.as_dict()
        if report.fidelity is not None and len(report.fidelity):
            window = report.fidelity_t <= report.fidelity_t[0] + FIDELITY_WINDOW * period
            entry["min_fidelity_window"] = float(report.fidelity[window].min()) if window.any() else None
        out[f"{first}_vs_{second}"] = entry
    return out


def _evaluate_checks(config: ScenarioConfig, summary: dict) -> List[CheckResult]:
    targets = config.check_targets
    results: List[CheckResult] = []
    primary = summary.get("full") or summary.get("tight-binding") or {}
    theory = summary.get("theory", {})
    basis = summary.get("basis", {})

    def add(name, value, ok, target):
        results.append(CheckResult(name, bool(value is not None and ok), value, target))

    if "ladder_spacing" in targets:
        value = basis.get("ladder_spacing")
        tol = targets.get("ladder_tol", 1e-3 * config.omega_B)
        add("ladder_spacing", value, value is not None and abs(value - targets["ladder_spacing"]) <= tol, f"{targets['ladder_spacing']} +- {tol}")
    if "x1" in targets:
        value = basis.get("couplings", {}).get("X1")
        tol = targets.get("x1_tol", 0.01)
        add("x1", value, value is not None and abs(value - targets["x1"]) <= tol, f"{targets['x1']} +- {tol}")
    if "frequency" in targets:
        rtol = targets.get("frequency_rtol", 0.01)
        goal = targets["frequency"]
        for key in ("frequency", "width_frequency") if config.modulation.active else ("frequency",):
            value = primary.get(key)
            add(key, value, value is not None and abs(value - goal) <= rtol * goal, f"{goal} +- {rtol * 100:g}%")
    if "amplitude" in targets:
        value = primary.get("amplitude")
        rtol = targets.get("amplitude_rtol", 0.2)
        goal = targets["amplitude"]
        add("amplitude", value, value is not None and abs(value - goal) <= rtol * goal, f"{goal} +- {rtol * 100:g}%")
    if "quoted_amplitude" in targets:
        quoted = targets["quoted_amplitude"]
        rtol = targets.get("amplitude_rtol", 0.2)
        value = primary.get("amplitude")
        ratio = value / quoted if value is not None else None
        add("quoted_amplitude_ratio", ratio, ratio is not None and abs(ratio - 1) <= rtol, f"1 +- {rtol * 100:g}% of {quoted}")
    if "speed" in targets:
        value = primary.get("speed")
        tol = targets.get("speed_tol", 0.003)
        add("speed", value, value is not None and abs(value - targets["speed"]) <= tol, f"{targets['speed']} +- {tol}")
        velocity, expected = primary.get("velocity"), theory.get("centroid_velocity")
        if velocity is not None and expected is not None:
            add("direction", velocity, np.sign(velocity) == np.sign(expected), f"sign of {expected:.4g}")
    if "theory_speed_rtol" in targets:
        # signed: the centroid runs against the group velocity
        value, goal = primary.get("velocity"), theory.get("centroid_velocity")
        rtol = targets["theory_speed_rtol"]
        ok = value is not None and goal is not None and abs(value - goal) <= rtol * abs(goal)
        add("theory_speed", value, ok, f"{goal} +- {rtol * 100:g}%")
    if "max_drift" in targets:
        value = primary.get("drift")
        add("max_drift", value, value is not None and abs(value) < targets["max_drift"], f"|drift| < {targets['max_drift']}")
    if "min_width_growth" in targets:
        value = primary.get("width_growth")
        ok = value is not None and value >= targets["min_width_growth"] and primary.get("width_monotone", False)
        add("min_width_growth", value, ok, f">= {targets['min_width_growth']} and monotone")
    if "width_law_rtol" in targets:
        value = summary.get("envelope_law", {}).get("width_law_deviation")
        add("width_law", value, value is not None and value <= targets["width_law_rtol"], f"<= {targets['width_law_rtol']}")
    if "split_speed_rtol" in targets:
        goal = theory.get("split_speed")
        rtol = targets["split_speed_rtol"]
        odd, even = primary.get("odd_velocity"), primary.get("even_velocity")
        for name, value in (("odd_speed", odd), ("even_speed", even)):
            speed = abs(value) if value is not None else None
            ok = speed is not None and goal is not None and abs(speed - abs(goal)) <= rtol * abs(goal)
            add(name, speed, ok, f"{goal} +- {rtol * 100:g}%")
        add("split_opposite", odd, odd is not None and even is not None and odd * even < 0, "opposite directions")
    comparison = summary.get("comparison", {})
    if "min_fidelity_tb" in targets:
        value = comparison.get("full_vs_tight-binding", {}).get("min_fidelity_window")
        add("fidelity_tb", value, value is not None and value >= targets["min_fidelity_tb"], f">= {targets['min_fidelity_tb']}")
    if "min_fidelity_secular" in targets:
        value = comparison.get("tight-binding_vs_secular", {}).get("min_fidelity_window")
        add("fidelity_secular", value, value is not None and value >= targets["min_fidelity_secular"], f">= {targets['min_fidelity_secular']}")
    return results


def run_scenario(
    config: ScenarioConfig,
    out_dir,
    check: bool = False,
    progress: Optional[Callable[[int, int], None]] = None,
) -> RunResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "scenario.ini").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize(config))
    logger.info(f"Running scenario '{config.name}' into {out_dir}")

    summary: Dict[str, object] = {"scenario": config.name, "seed": config.seed, "signature": config_signature(config)}
    try:
        basis, basis_summary = run_basis(config, out_dir)
        summary["basis"] = basis_summary
        trajectories: Dict[str, Trajectory] = {}
        envelope = None
        if config.engines:
            trajectories, envelope = _run_engines(config, basis, out_dir, progress)
            summary.update(_analyse(config, basis, trajectories, envelope))
    except WannierStarkError as e:
        logger.error(f"Scenario '{config.name}' failed: {e}")
        with (out_dir / "error.txt").open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{type(e).__name__}: {e}\n\n")
            fh.write(traceback.format_exc())
        return RunResult(EXIT_ENGINE, out_dir, summary)

    checks = _evaluate_checks(config, summary) if check else []
    if checks:
        summary["checks"] = {result.name: result.as_dict() for result in checks}
    for result in checks:
        log = logger.info if result.passed else logger.error
        log(f"Check {result.name}: {'met' if result.passed else 'FAILED'} (value {result.value}, target {result.target})")
    write_summary_json(out_dir / "summary.json", summary)
    write_report(out_dir / "report.txt", summary)
    status = EXIT_CHECK if any(not result.passed for result in checks) else EXIT_OK
    return RunResult(status, out_dir, summary, checks)


def _run_engines(config: ScenarioConfig, basis: WSBasis, out_dir: Path, progress) -> Tuple[Dict[str, Trajectory], object]:
    mod = config.modulation
    packet = wavepacket_from_coefficients(basis, initial_coefficients(config, basis.sites))
    lattice = TightBindingLattice.from_basis(basis, config.tb_sites)
    tb_initial = lattice.embed(basis.sites, packet.coefficients)
    tb_every = config.tb_sample_every
    trajectories: Dict[str, Trajectory] = {}
    envelope = None

    if "full" in config.engines:
        trajectory = _full_engine(config, basis, packet, progress)
        trajectories["full"] = trajectory
        for time, snapshot in sorted(trajectory.snapshots.items()):
            export_snapshot_csv(out_dir / f"snapshot_t{time:g}.csv", snapshot)
    if "tight-binding" in config.engines:
        trajectories["tight-binding"] = integrate_cn(tb_initial, lattice, mod, config.t_end, config.tb_dt, tb_every)
    if "secular" in config.engines:
        model = secular_reduce(config.params, mod, basis.X, config.resonance)
        (out_dir / "secular-model.txt").write_text(model.dump(), encoding="utf-8")
        trajectories["secular"] = integrate_dn_resonant(tb_initial, model, config.t_end, config.tb_dt, lattice, mod, tb_every)
    if "envelope" in config.engines:
        x_start = float(trajectories["full"].mean_x[0]) if "full" in trajectories else mean_position(packet)
        envelope = envelope_general(config.k0_interaction, basis.X, config.params, mod, config.t_end, a0=2 * config.width, x_start=x_start)
        trajectories["envelope"] = envelope.to_trajectory()

    for engine, trajectory in trajectories.items():
        export_trajectory_csv(out_dir / f"trajectory_{engine}.csv", trajectory)
    return trajectories, envelope

