"""Run configuration: schema, loading, validation, presets and sampler construction"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import copy
import json
import logging
import math
import os

import yaml
from dataclasses_json import Undefined, dataclass_json
from dataclasses_json.undefined import UndefinedParameterError

from . import __version__
from .core import (MAX_PARTICLES, CollapseParams, GridWavefunction, ParticleSpec, SpatialGrid,
                   gaussian_state, product_state, superposition)
from .csl import MAX_OCCUPATION, MAX_SITES, CslConfig, CslSampler, LatticeFockSpace, gamma_from
from .errors import ConfigurationError
from .grw import GrwConfig, GrwSampler
from .hamiltonian import HamiltonianKind, HamiltonianSpec
from .measurement import MeasurementModel, MeasurementSampler
from .qmupl import GaussianConfig, GaussianSampler, QmuplConfig, QmuplSampler, stationary_gaussian
from .sampling import TrajectorySampler

logger = logging.getLogger(__name__)

MODELS = ("grw", "qmupl", "gaussian", "csl", "measurement")
OUTPUT_FORMATS = ("csv", "json", "ndjson")
INITIAL_KINDS = ("gaussian", "superposition", "stationary")
HAMILTONIAN_KINDS = {
    "none": HamiltonianKind.NONE,
    "free": HamiltonianKind.FREE,
    "harmonic": HamiltonianKind.HARMONIC,
    "linear": HamiltonianKind.LINEAR,
}
WORKERS_ENV = "COLLAPSAR_WORKERS"


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class GridSection:
    x_min: float = -4.0
    x_max: float = 4.0
    n_points: int = 128


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class ParticleSection:
    mass: float = 1.0
    label: str = "particle"


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class CollapseSection:
    """Simulation-unit collapse constants; ``gamma`` = None derives the CSL strength from lambda and alpha"""
    lambda_sim: float = 1.0
    alpha: float = 1.0
    m0: float = 1.0
    gamma: Optional[float] = None


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class IntegratorSection:
    dt: float = 1e-3
    horizon: float = 1.0
    output_every: int = 1
    n_outputs: int = 100
    spacing: str = "linear"
    t_min: Optional[float] = None
    substeps: int = 20
    guard_length: Optional[float] = None
    comoving: bool = False
    hold_steps: int = 100


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class EnsembleSection:
    n: int = 1000
    master_seed: int = 0
    workers: Optional[int] = None
    chunk_size: int = 64


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class OutputSection:
    directory: str = "runs/latest"
    formats: List[str] = field(default_factory=lambda: list(OUTPUT_FORMATS))
    gzip: bool = False


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class InitialStateSection:
    kind: str = "gaussian"
    centers: List[float] = field(default_factory=lambda: [0.0])
    weights: List[float] = field(default_factory=lambda: [1.0])
    width: float = 0.5
    momentum: float = 0.0


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class HamiltonianSection:
    kind: str = "free"
    omega: float = 0.0
    g: float = 0.0


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class MeasurementSection:
    """Micro state sqrt(w)|+> + sqrt(1-w) e^{i phase}|-> and the pointer constants"""
    weight_plus: float = 0.5
    relative_phase: float = 0.0
    pointer_mass: float = 600.0
    lambda_cm: float = 5000.0
    coupling: float = 1.0
    window: float = 1.0
    pointer_width: Optional[float] = None
    collapse_threshold: float = 1e-3


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class LatticeSection:
    n_sites: int = 4
    n_max: int = 1
    spacing: float = 1.0
    periodic: bool = True
    hopping: float = 1.0
    n_particles: int = 1
    initial_occupations: Optional[List[List[int]]] = None
    initial_weights: Optional[List[float]] = None


@dataclass_json(undefined=Undefined.RAISE)
@dataclass
class RunConfig:
    """Complete description of one run; everything in it except workers and the output directory
    determines the output bytes."""
    model: str = "qmupl"
    grid: GridSection = field(default_factory=GridSection)
    particles: List[ParticleSection] = field(default_factory=lambda: [ParticleSection()])
    collapse: CollapseSection = field(default_factory=CollapseSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    output: OutputSection = field(default_factory=OutputSection)
    initial_state: InitialStateSection = field(default_factory=InitialStateSection)
    hamiltonian: HamiltonianSection = field(default_factory=HamiltonianSection)
    measurement: Optional[MeasurementSection] = None
    lattice: Optional[LatticeSection] = None

    def validate(self) -> None:
        """Collect every field-level problem and raise them together"""
        problems: List[str] = []

        def check(name: str, ok, message: str):
            try:
                passed = bool(ok())
            except TypeError:
                passed = False
            if not passed:
                problems.append(f"{name}: {message}")

        check("model", lambda: self.model in MODELS, f"must be one of {', '.join(MODELS)}")

        g = self.grid
        check("grid.x_max", lambda: g.x_max > g.x_min, "must exceed grid.x_min")
        check("grid.n_points", lambda: g.n_points >= 8 and g.n_points & (g.n_points - 1) == 0,
              "must be a power of two >= 8")

        check("particles", lambda: 1 <= len(self.particles) <= MAX_PARTICLES,
              f"between 1 and {MAX_PARTICLES} particles required")
        for i, p in enumerate(self.particles):
            check(f"particles[{i}].mass", lambda p=p: p.mass > 0, "must be > 0")

        c = self.collapse
        check("collapse.lambda_sim", lambda: c.lambda_sim >= 0, "must be >= 0")
        check("collapse.alpha", lambda: c.alpha > 0, "must be > 0")
        check("collapse.m0", lambda: c.m0 > 0, "must be > 0")
        check("collapse.gamma", lambda: c.gamma is None or c.gamma >= 0, "must be >= 0")

        it = self.integrator
        check("integrator.dt", lambda: it.dt > 0, "must be > 0")
        check("integrator.horizon", lambda: it.horizon > 0, "must be > 0")
        check("integrator.output_every", lambda: it.output_every >= 1, "must be >= 1")
        check("integrator.n_outputs", lambda: it.n_outputs >= 1, "must be >= 1")
        check("integrator.spacing", lambda: it.spacing in ("linear", "log"), "must be 'linear' or 'log'")
        check("integrator.t_min", lambda: it.t_min is None or 0 < it.t_min < it.horizon,
              "must lie inside (0, horizon)")
        check("integrator.substeps", lambda: it.substeps >= 1, "must be >= 1")
        check("integrator.guard_length", lambda: it.guard_length is None or it.guard_length > 0, "must be > 0")
        check("integrator.hold_steps", lambda: it.hold_steps >= 1, "must be >= 1")

        e = self.ensemble
        check("ensemble.n", lambda: e.n >= 1, "must be >= 1")
        check("ensemble.master_seed", lambda: 0 <= e.master_seed < 2 ** 64, "must be an unsigned 64-bit integer")
        check("ensemble.workers", lambda: e.workers is None or e.workers >= 1, "must be >= 1")
        check("ensemble.chunk_size", lambda: e.chunk_size >= 1, "must be >= 1")

        check("output.formats", lambda: all(f in OUTPUT_FORMATS for f in self.output.formats),
              f"entries must be in {', '.join(OUTPUT_FORMATS)}")

        s = self.initial_state
        check("initial_state.kind", lambda: s.kind in INITIAL_KINDS, f"must be one of {', '.join(INITIAL_KINDS)}")
        check("initial_state.width", lambda: s.width > 0, "must be > 0")
        check("initial_state.centers", lambda: len(s.centers) >= 1, "at least one center required")
        if s.kind == "superposition":
            check("initial_state.weights", lambda: len(s.weights) == len(s.centers) and min(s.weights) >= 0
                  and sum(s.weights) > 0, "one non-negative weight per center, not all zero")
            check("initial_state.kind", lambda: len(self.particles) == 1, "superpositions need a single particle")
        if s.kind == "gaussian":
            check("initial_state.centers", lambda: len(s.centers) in (1, len(self.particles)),
                  "give one center or one per particle")
        for i, x in enumerate(s.centers):
            check(f"initial_state.centers[{i}]", lambda x=x: g.x_min <= x < g.x_max, "must lie inside the grid")

        h = self.hamiltonian
        check("hamiltonian.kind", lambda: h.kind in HAMILTONIAN_KINDS,
              f"must be one of {', '.join(HAMILTONIAN_KINDS)}")
        check("hamiltonian.omega", lambda: h.omega >= 0, "must be >= 0")
        if self.model == "gaussian":
            check("hamiltonian.kind", lambda: h.kind in ("free", "harmonic"),
                  "Gaussian integration supports free and harmonic H")

        if self.model == "measurement":
            m = self.measurement or MeasurementSection()
            check("measurement.weight_plus", lambda: 0 <= m.weight_plus <= 1, "must lie in [0, 1]")
            check("measurement.pointer_mass", lambda: m.pointer_mass > 0, "must be > 0")
            check("measurement.lambda_cm", lambda: m.lambda_cm > 0, "must be > 0")
            check("measurement.window", lambda: 0 < m.window <= it.horizon, "must lie in (0, horizon]")
            check("measurement.coupling", lambda: m.coupling != 0, "must be non-zero")
            check("measurement.pointer_width", lambda: m.pointer_width is None or m.pointer_width > 0,
                  "must be > 0")
            check("measurement.collapse_threshold", lambda: 0 < m.collapse_threshold < 0.5, "must lie in (0, 0.5)")

        if self.model == "csl":
            lat = self.lattice or LatticeSection()
            check("lattice.n_sites", lambda: 1 <= lat.n_sites <= MAX_SITES, f"must be in 1..{MAX_SITES}")
            check("lattice.n_max", lambda: 1 <= lat.n_max <= MAX_OCCUPATION, f"must be in 1..{MAX_OCCUPATION}")
            check("lattice.spacing", lambda: lat.spacing > 0, "must be > 0")
            check("lattice.n_particles", lambda: 0 <= lat.n_particles <= lat.n_sites * lat.n_max,
                  "must fit into the truncated lattice")
            if lat.initial_occupations is not None:
                check("lattice.initial_weights", lambda: lat.initial_weights is not None
                      and len(lat.initial_weights) == len(lat.initial_occupations)
                      and min(lat.initial_weights) >= 0, "one non-negative weight per occupation")
                for i, occ in enumerate(lat.initial_occupations):
                    check(f"lattice.initial_occupations[{i}]", lambda occ=occ: len(occ) == lat.n_sites
                          and all(0 <= n <= lat.n_max for n in occ), "must list one allowed occupation per site")

        if problems:
            raise ConfigurationError("Invalid run configuration", problems)

    def manifest_dict(self) -> Dict[str, Any]:
        """Resolved configuration without the settings that never change outputs"""
        data = self.to_dict()
        data["ensemble"].pop("workers", None)
        data["output"].pop("directory", None)
        return {"version": __version__, "config": data}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Parse and validate; a ``preset`` key names the preset the remaining keys override"""
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a mapping")
    data = dict(data)
    preset_name = data.pop("preset", None)
    if preset_name is not None:
        data = _merge(preset(preset_name).to_dict(), data)
    try:
        config = RunConfig.from_dict(data)
    except UndefinedParameterError as e:
        raise ConfigurationError("Unknown configuration keys", [str(e)]) from e
    except (TypeError, ValueError, KeyError, AttributeError) as e:
        raise ConfigurationError("Malformed configuration", [str(e)]) from e
    config.validate()
    return config


def load_config(path: Path) -> RunConfig:
    """Read a JSON (or YAML) run configuration"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"configuration file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigurationError(f"cannot parse {path.name}", [str(e)]) from e
    logger.info(f"Loaded configuration from {path}")
    return config_from_dict(data)


def born_default() -> RunConfig:
    """Two-lobe QMUPL state, lobes at +-1.5 with weights 0.3 / 0.7, H = 0"""
    return RunConfig(
        model="qmupl",
        grid=GridSection(-4.0, 4.0, 128),
        collapse=CollapseSection(lambda_sim=1.0),
        integrator=IntegratorSection(dt=2e-3, horizon=3.0, output_every=10, guard_length=2.0),
        ensemble=EnsembleSection(n=1000, master_seed=7),
        initial_state=InitialStateSection(kind="superposition", centers=[1.5, -1.5], weights=[0.3, 0.7],
                                          width=0.4),
        hamiltonian=HamiltonianSection(kind="none"),
    )


def pointer_default() -> RunConfig:
    """Measurement preset: collapse time << coupling window << pointer spreading time"""
    return RunConfig(
        model="measurement",
        grid=GridSection(-1.25, 1.25, 256),
        integrator=IntegratorSection(dt=2e-4, horizon=1.0, output_every=10, guard_length=0.1,
                                     comoving=True, hold_steps=100),
        ensemble=EnsembleSection(n=1000, master_seed=7),
        measurement=MeasurementSection(),
    )


PRESETS = {"born_default": born_default, "pointer_default": pointer_default}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset '{name}'", [f"preset: must be one of {', '.join(PRESETS)}"])
    return PRESETS[name]()


def resolve_workers(requested: Optional[int], config: Optional[RunConfig] = None) -> int:
    """Explicit value, then the config, then COLLAPSAR_WORKERS, then 1"""
    if requested is not None:
        workers = requested
    elif config is not None and config.ensemble.workers is not None:
        workers = config.ensemble.workers
    else:
        raw = os.environ.get(WORKERS_ENV)
        try:
            workers = int(raw) if raw else 1
        except ValueError as e:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from e
    if workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {workers}")
    return workers


# Builders

def build_grid(config: RunConfig) -> SpatialGrid:
    g = config.grid
    return SpatialGrid(g.x_min, g.x_max, g.n_points)


def build_particles(config: RunConfig) -> List[ParticleSpec]:
    return [ParticleSpec(p.mass, p.label) for p in config.particles]


def build_hamiltonian(config: RunConfig) -> HamiltonianSpec:
    h = config.hamiltonian
    masses = tuple(p.mass for p in config.particles)
    kind = HAMILTONIAN_KINDS[h.kind]
    return HamiltonianSpec(kind, masses=masses, omega=h.omega, g=h.g)


def build_initial_state(config: RunConfig, grid: Optional[SpatialGrid] = None) -> GridWavefunction:
    grid = grid or build_grid(config)
    s = config.initial_state
    if s.kind == "superposition":
        return superposition(grid, s.centers, s.weights, s.width)
    if s.kind == "stationary":
        return stationary_gaussian(grid, s.centers[0], config.particles[0].mass, config.collapse.lambda_sim,
                                   s.momentum, config.hamiltonian.omega)
    centers = s.centers if len(s.centers) == len(config.particles) else s.centers * len(config.particles)
    states = [gaussian_state(grid, c, s.width, s.momentum) for c in centers]
    return states[0] if len(states) == 1 else product_state(*states)


def build_measurement(config: RunConfig) -> MeasurementModel:
    m = config.measurement or MeasurementSection()
    it = config.integrator
    a = math.sqrt(m.weight_plus)
    b = math.sqrt(1.0 - m.weight_plus) * complex(math.cos(m.relative_phase), math.sin(m.relative_phase))
    return MeasurementModel(grid=build_grid(config), a=a, b=b, pointer_mass=m.pointer_mass,
                            lambda_cm=m.lambda_cm, coupling=m.coupling, window=m.window, horizon=it.horizon,
                            dt=it.dt, pointer_width=m.pointer_width, guard_length=it.guard_length,
                            comoving=it.comoving, hold_steps=it.hold_steps,
                            collapse_threshold=m.collapse_threshold, output_every=it.output_every)


def build_csl(config: RunConfig) -> CslConfig:
    lat = config.lattice or LatticeSection()
    c = config.collapse
    space = LatticeFockSpace(lat.n_sites, lat.n_max, lat.spacing, lat.periodic)
    gamma = c.gamma if c.gamma is not None else gamma_from(CollapseParams.simulation(c.lambda_sim, c.alpha, c.m0))
    initial: Optional[List[Tuple[Tuple[int, ...], complex]]] = None
    if lat.initial_occupations is not None:
        initial = [(tuple(occ), complex(math.sqrt(w)))
                   for occ, w in zip(lat.initial_occupations, lat.initial_weights or [])]
    return CslConfig(space=space, gamma=gamma, alpha=c.alpha, dt=config.integrator.dt,
                     horizon=config.integrator.horizon, hopping=lat.hopping, n_particles=lat.n_particles,
                     initial=initial, output_every=config.integrator.output_every)


def build_sampler(config: RunConfig) -> TrajectorySampler:
    """Sampler for the configured model"""
    config.validate()
    it = config.integrator
    c = config.collapse
    if config.model == "measurement":
        return MeasurementSampler(build_measurement(config))
    if config.model == "csl":
        return CslSampler(build_csl(config))
    if config.model == "gaussian":
        s = config.initial_state
        return GaussianSampler(GaussianConfig(
            mass=config.particles[0].mass, lambda_sim=c.lambda_sim, omega=config.hamiltonian.omega,
            q0=s.centers[0], p0=s.momentum, width0=None if s.kind == "stationary" else s.width,
            horizon=it.horizon, n_outputs=it.n_outputs, spacing=it.spacing, t_min=it.t_min,
            substeps=it.substeps))

    grid = build_grid(config)
    particles = build_particles(config)
    h = build_hamiltonian(config)
    psi0 = build_initial_state(config, grid)
    if config.model == "grw":
        return GrwSampler(GrwConfig(
            grid=grid, particles=particles, params=CollapseParams.simulation(c.lambda_sim, c.alpha, c.m0),
            horizon=it.horizon, initial_state=psi0, hamiltonian=h,
            dt=None if h.kind == HamiltonianKind.NONE else it.dt, n_outputs=it.n_outputs))
    s = config.initial_state
    born_centers = (tuple(s.centers) if s.kind == "superposition" and len(s.centers) == 2 else None)
    return QmuplSampler(QmuplConfig(
        grid=grid, particles=particles, lambda0_sim=c.lambda_sim, dt=it.dt, horizon=it.horizon,
        initial_state=psi0, hamiltonian=h, output_every=it.output_every, m0=c.m0,
        guard_length=it.guard_length, comoving=it.comoving, born_centers=born_centers,
        hold_steps=it.hold_steps))


def outcome_weights(config: RunConfig) -> Optional[Tuple[float, ...]]:
    """Expected outcome probabilities for Born counting, if the run has any"""
    if config.model == "measurement":
        w = (config.measurement or MeasurementSection()).weight_plus
        return (w, 1.0 - w)
    s = config.initial_state
    if config.model == "qmupl" and s.kind == "superposition" and len(s.centers) == 2:
        total = sum(s.weights)
        return tuple(w / total for w in s.weights)
    return None
