"""GRW process: Poisson-timed Gaussian localization jumps interleaved with Schrodinger evolution"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from .core import (
    BOUNDARY_TOLERANCE,
    MIN_NORM,
    CollapseParams,
    GridWavefunction,
    NoiseStream,
    ParticleSpec,
    SpatialGrid,
    grw_rate,
    spread_position,
)
from .errors import ConfigurationError, DegenerateJumpError, FitError
from .hamiltonian import HamiltonianKind, HamiltonianSpec, SplitStepPropagator
from .sampling import GRID_OBSERVABLES, SeriesRecorder, TrajectorySampler, max_boundary_fraction, observe

logger = logging.getLogger(__name__)

Observer = Callable[[float, GridWavefunction, "JumpRecord"], None]
StopCondition = Callable[[float, GridWavefunction], bool]


@dataclass
class JumpRecord:
    """One localization event"""
    time: float
    particle: int
    center: float
    spread_before: float
    spread_after: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "time": self.time,
            "particle": self.particle,
            "center": self.center,
            "spread_before": self.spread_before,
            "spread_after": self.spread_after,
        }


def sample_jump_times(rate: float, horizon: float, noise: NoiseStream) -> List[float]:
    """Event times of a Poisson process with the given rate on [0, horizon]"""
    if rate < 0 or not horizon > 0:
        raise ConfigurationError(f"need rate >= 0 and horizon > 0 (got {rate}, {horizon})")
    times: List[float] = []
    if rate == 0:
        return times
    t = noise.exponential(1.0 / rate)
    while t <= horizon:
        times.append(t)
        t += noise.exponential(1.0 / rate)
    return times


def localization_profile(grid: SpatialGrid, center: float, alpha: float) -> np.ndarray:
    """(alpha/pi)^(1/4) exp(-alpha/2 (x - center)^2) on the periodic grid"""
    d = grid.displacement(grid.x, center)
    return (alpha / math.pi) ** 0.25 * np.exp(-0.5 * alpha * d * d)


def jump_position_density(psi: GridWavefunction, particle: int, alpha: float) -> np.ndarray:
    """Probability density of the jump center: the marginal convolved with a Gaussian of variance 1/(2 alpha).

    The kernel is normalized on the grid so the density sums to one (times dx).
    """
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    grid = psi.grid
    marginal = psi.marginal(particle)
    d = grid.displacement(grid.x, grid.x[0])
    kernel = np.exp(-alpha * d * d)
    kernel /= np.sum(kernel) * grid.dx
    density = np.real(np.fft.ifft(np.fft.fft(marginal) * np.fft.fft(kernel))) * grid.dx
    density = np.maximum(density, 0.0)
    return density / (np.sum(density, axis=-1, keepdims=True) * grid.dx)


def sample_jump_center(grid: SpatialGrid, density: np.ndarray, u: float) -> float:
    """Inverse-CDF draw of a grid point from a density, given a uniform variate u in [0, 1)"""
    cdf = np.cumsum(density)
    index = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return float(grid.x[min(index, grid.n_points - 1)])


def apply_jump(psi: GridWavefunction, particle: int, center: float, alpha: float,
               time: float = 0.0) -> Tuple[GridWavefunction, JumpRecord]:
    """psi -> L(center) psi / ||L(center) psi|| acting on one particle coordinate"""
    if not psi.grid.contains(center):
        raise ConfigurationError(f"jump center {center} outside grid")
    before = float(spread_position(psi, particle))
    profile = localization_profile(psi.grid, center, alpha)
    shape = [1] * psi.n_particles
    shape[particle] = psi.grid.n_points
    view = psi.coordinate_view() * profile.reshape(shape)
    amps = view.reshape(psi.amplitudes.shape)
    norm = math.sqrt(float(np.sum(np.abs(amps) ** 2)) * psi.volume_element)
    if not norm > MIN_NORM:
        raise DegenerateJumpError(f"jump at {center:.6g} hit a region without support (norm {norm:.3e})")
    jumped = psi.with_amplitudes(amps / norm)
    return jumped, JumpRecord(time, particle, float(center), before, float(spread_position(jumped, particle)))


class _Evolver:
    """Schrodinger evolution over arbitrary intervals with a fixed step plus one remainder step.

    Every interval between events starts a fresh step grid at the event time, so the steps do
    not follow one global dt grid: the last step before each jump or output is shorter than dt.
    """

    def __init__(self, grid: SpatialGrid, h: HamiltonianSpec, dt: Optional[float]):
        self.active = h.kind != HamiltonianKind.NONE
        if self.active and dt is None:
            raise ConfigurationError("dt is required for a non-trivial Hamiltonian")
        self.grid, self.h, self.dt = grid, h, dt
        self.step = SplitStepPropagator(grid, h, dt) if self.active else None

    def advance(self, psi: GridWavefunction, duration: float) -> GridWavefunction:
        if not self.active or duration <= 0:
            return psi
        n_full = int(math.floor(duration / self.dt + 1e-9))
        for _ in range(n_full):
            psi = self.step.apply(psi)
        rest = duration - n_full * self.dt
        if rest > 1e-12 * self.dt:
            psi = SplitStepPropagator(self.grid, self.h, rest).apply(psi)
        return psi


def _timeline(particles: Sequence[ParticleSpec], params: CollapseParams, horizon: float,
              noise: NoiseStream) -> List[Tuple[float, int]]:
    """Merged (time, particle) jump events; particle n draws its times from substream 2n+1"""
    events = []
    for n, particle in enumerate(particles):
        for t in sample_jump_times(grw_rate(particle, params), horizon, noise.child(2 * n + 1)):
            events.append((t, n))
    events.sort()
    return events


def simulate_grw(psi0: GridWavefunction, h: HamiltonianSpec, particles: Sequence[ParticleSpec],
                 params: CollapseParams, horizon: float, noise: NoiseStream, dt: Optional[float] = None,
                 output_times: Optional[Sequence[float]] = None, observer: Optional[Observer] = None,
                 stop_when: Optional[StopCondition] = None) -> Tuple[GridWavefunction, List[JumpRecord], List[Tuple[float, GridWavefunction]]]:
    """Event-driven GRW run returning the final state, the jumps and snapshots at ``output_times``.

    Jump centers for particle n come from substream 2n+2. A jump and an output at the same
    time are taken in that order. ``stop_when`` is checked after every jump and ends the
    run early (remaining outputs are not produced).
    """
    if len(particles) != psi0.n_particles:
        raise ConfigurationError("one ParticleSpec per particle required")
    evolver = _Evolver(psi0.grid, h, dt)
    position_streams = [noise.child(2 * n + 2) for n in range(len(particles))]
    events = [(t, 0, n) for t, n in _timeline(particles, params, horizon, noise)]
    events += [(float(t), 1, -1) for t in ([] if output_times is None else output_times)]
    events.sort()

    psi, now = psi0, 0.0
    jumps: List[JumpRecord] = []
    snapshots: List[Tuple[float, GridWavefunction]] = []
    for t, kind, n in events:
        psi = evolver.advance(psi, t - now)
        now = t
        if kind == 1:
            snapshots.append((t, psi))
            continue
        density = jump_position_density(psi, n, params.alpha)
        center = sample_jump_center(psi.grid, density, position_streams[n].uniform())
        psi, record = apply_jump(psi, n, center, params.alpha, t)
        jumps.append(record)
        if observer is not None:
            observer(t, psi, record)
        if stop_when is not None and stop_when(t, psi):
            return psi, jumps, snapshots
    psi = evolver.advance(psi, horizon - now)
    return psi, jumps, snapshots


def run_grw_trajectory(psi0: GridWavefunction, h: HamiltonianSpec, particles: Sequence[ParticleSpec],
                       params: CollapseParams, horizon: float, noise: NoiseStream, dt: Optional[float] = None,
                       observer: Optional[Observer] = None,
                       stop_when: Optional[StopCondition] = None) -> Tuple[GridWavefunction, List[JumpRecord]]:
    """One GRW trajectory; deterministic given the noise stream"""
    psi, jumps, _ = simulate_grw(psi0, h, particles, params, horizon, noise, dt,
                                 observer=observer, stop_when=stop_when)
    return psi, jumps


def minority_weight(psi: GridWavefunction, split: float, particle: int = 0) -> float:
    """Smaller of the probabilities left and right of ``split``"""
    density = psi.marginal(particle)
    left = float(np.sum(density[psi.grid.x < split]))
    total = float(np.sum(density))
    return min(left, total - left) / total


def collapse_time(psi0: GridWavefunction, particle: ParticleSpec, params: CollapseParams, horizon: float,
                  noise: NoiseStream, split: float = 0.0, threshold: float = 1e-3,
                  h: Optional[HamiltonianSpec] = None, dt: Optional[float] = None) -> Optional[float]:
    """First jump time after which the minority lobe weight is below ``threshold``, None if never"""
    h = h or HamiltonianSpec.none()
    hit: List[float] = []

    def collapsed(t, psi):
        if minority_weight(psi, split) < threshold:
            hit.append(t)
            return True
        return False

    run_grw_trajectory(psi0, h, [particle], params, horizon, noise, dt, stop_when=collapsed)
    return hit[0] if hit else None


def amplification_exponent(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Log-log slope of mean collapse time against the number of constituents"""
    sizes = np.asarray(sizes, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(sizes) < 2 or len(sizes) != len(times) or np.any(sizes <= 0) or np.any(~(times > 0)):
        raise FitError("amplification fit needs at least two positive (size, time) pairs")
    slope, _ = np.polyfit(np.log(sizes), np.log(times), 1)
    return float(slope)


@dataclass
class GrwConfig:
    grid: SpatialGrid
    particles: List[ParticleSpec]
    params: CollapseParams
    horizon: float
    initial_state: GridWavefunction
    hamiltonian: Optional[HamiltonianSpec] = None
    dt: Optional[float] = None
    n_outputs: int = 100

    def __post_init__(self):
        if self.hamiltonian is None:
            self.hamiltonian = HamiltonianSpec.none(len(self.particles))

    @property
    def output_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_outputs + 1)

    def validate(self) -> None:
        problems = []
        if not self.horizon > 0:
            problems.append("horizon: must be positive")
        if self.n_outputs < 1:
            problems.append("n_outputs: must be >= 1")
        if self.initial_state.grid != self.grid:
            problems.append("initial_state: lives on a different grid")
        if self.initial_state.n_particles != len(self.particles):
            problems.append("initial_state: particle count differs from particles")
        if self.hamiltonian.n_particles != len(self.particles):
            problems.append("hamiltonian: particle count differs from particles")
        if self.hamiltonian.kind != HamiltonianKind.NONE and not (self.dt and self.dt > 0):
            problems.append("dt: required and positive for a non-trivial Hamiltonian")
        if problems:
            raise ConfigurationError("Invalid GRW configuration", problems)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "masses": [p.mass for p in self.particles],
            "params": self.params.to_dict(),
            "horizon": self.horizon,
            "hamiltonian": self.hamiltonian.to_dict(),
            "dt": self.dt,
            "n_outputs": self.n_outputs,
        }


class GrwSampler(TrajectorySampler):
    """Ensemble adapter for GRW runs; records carry every jump"""
    model = "grw"

    def __init__(self, config: GrwConfig):
        config.validate()
        self.config = config

    @property
    def times(self) -> np.ndarray:
        return self.config.output_times

    def simulate(self, indices, master_seed):
        c = self.config
        records: List[Dict[str, Any]] = []
        rows = {name: [] for name in GRID_OBSERVABLES}
        flags = 0
        for i in indices:
            _, jumps, snapshots = simulate_grw(c.initial_state, c.hamiltonian, c.particles, c.params,
                                               c.horizon, NoiseStream(master_seed, i), c.dt,
                                               output_times=self.times)
            single = SeriesRecorder(GRID_OBSERVABLES, 1, len(snapshots))
            worst = 0.0
            for _, psi in snapshots:
                single.record(observe(psi, c.hamiltonian))
                worst = max(worst, float(max_boundary_fraction(psi)[0]))
            for name in GRID_OBSERVABLES:
                rows[name].append(single.result()[name][0])
            flags += int(worst > BOUNDARY_TOLERANCE)
            records.extend({"index": int(i), **j.to_dict()} for j in jumps)
        return {name: np.vstack(rows[name]) for name in GRID_OBSERVABLES}, records, flags

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model, **self.config.to_dict()}
