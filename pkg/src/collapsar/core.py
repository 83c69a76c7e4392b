"""Core domain types: spatial grid, grid wavefunctions, collapse parameters and noise streams"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np

from .errors import ConfigurationError, DegenerateStateError, ShapeError

logger = logging.getLogger(__name__)

# Simulation units: hbar = 1, reference mass m0 = 1
HBAR = 1.0

NORM_TOLERANCE = 1e-6
MIN_NORM = 1e-30
BOUNDARY_CELLS = 2
BOUNDARY_TOLERANCE = 1e-8
MAX_PARTICLES = 3
MAX_POINTS_PER_DIMENSION = {2: 256, 3: 64}

Real = Union[float, np.ndarray]


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic 1-D grid; point i sits at x_min + i*dx, x_max is identified with x_min"""
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        problems = []
        if not self.x_max > self.x_min:
            problems.append(f"x_max: must exceed x_min ({self.x_max} <= {self.x_min})")
        if not isinstance(self.n_points, (int, np.integer)) or self.n_points < 8 \
                or not _is_power_of_two(int(self.n_points)):
            problems.append(f"n_points: must be a power of two >= 8 (got {self.n_points})")
        if problems:
            raise ConfigurationError("Invalid spatial grid", problems)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def half_width(self) -> float:
        return 0.5 * self.length

    @property
    def center(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def dx(self) -> float:
        return self.length / self.n_points

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order"""
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)

    def displacement(self, x: np.ndarray, center: Real) -> np.ndarray:
        """Minimum-image displacement x - center on the periodic box"""
        return (x - center + self.half_width) % self.length - self.half_width

    def contains(self, x: float) -> bool:
        return self.x_min <= x < self.x_max

    def to_dict(self) -> Dict[str, Any]:
        return {"x_min": self.x_min, "x_max": self.x_max, "n_points": int(self.n_points)}


def make_grid(x_min: float, x_max: float, n_points: int) -> SpatialGrid:
    """Build a uniform periodic grid; raises ConfigurationError on bad bounds or size"""
    return SpatialGrid(float(x_min), float(x_max), int(n_points))


@dataclass
class GridWavefunction:
    """Complex amplitudes on a grid for k <= 3 particles (row-major flattened).

    ``amplitudes`` has shape ``(*batch, n_points**k)`` or, with an internal two-or-more
    level system, ``(*batch, levels, n_points**k)``. Leading batch axes hold independent
    trajectories that are integrated together; every operation acts row-wise.
    """
    grid: SpatialGrid
    amplitudes: np.ndarray
    n_particles: int = 1
    levels: int = 1
    norm_tolerance: float = NORM_TOLERANCE

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if not 1 <= self.n_particles <= MAX_PARTICLES:
            raise ConfigurationError(f"n_particles must be in 1..{MAX_PARTICLES}, got {self.n_particles}")
        limit = MAX_POINTS_PER_DIMENSION.get(self.n_particles)
        if limit is not None and self.grid.n_points > limit:
            raise ConfigurationError(
                f"{self.n_particles}-particle grids are limited to {limit} points per dimension")
        expected = self.grid.n_points ** self.n_particles
        if self.amplitudes.ndim < 1 or self.amplitudes.shape[-1] != expected:
            raise ShapeError(f"amplitudes last axis must have length {expected}, "
                             f"got shape {self.amplitudes.shape}")
        if self.levels > 1 and (self.amplitudes.ndim < 2 or self.amplitudes.shape[-2] != self.levels):
            raise ShapeError(f"amplitudes must carry a levels axis of size {self.levels}")

    @property
    def state_axes(self) -> Tuple[int, ...]:
        return (-1,) if self.levels == 1 else (-2, -1)

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.amplitudes.shape[:self.amplitudes.ndim - len(self.state_axes)]

    @property
    def volume_element(self) -> float:
        return self.grid.dx ** self.n_particles

    def norm_squared(self) -> Real:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=self.state_axes) * self.volume_element

    def coordinate_view(self, array: Optional[np.ndarray] = None) -> np.ndarray:
        """View with one axis per particle coordinate (and the levels axis kept)"""
        a = self.amplitudes if array is None else array
        return a.reshape(a.shape[:-1] + (self.grid.n_points,) * self.n_particles)

    def particle_axis(self, particle: int) -> int:
        """Axis index of a particle's coordinate in ``coordinate_view``"""
        if not 0 <= particle < self.n_particles:
            raise IndexError(f"particle {particle} out of range for {self.n_particles} particles")
        return -self.n_particles + particle

    def marginal(self, particle: int = 0) -> np.ndarray:
        """Single-particle position density, shape (*batch, n_points), integrating to the norm"""
        density = np.abs(self.coordinate_view()) ** 2
        axis = self.particle_axis(particle)
        others = tuple(a for a in range(-self.n_particles, 0) if a != axis)
        if self.levels > 1:
            others = others + (-self.n_particles - 1,)
        if others:
            density = np.sum(density, axis=others)
        return density * self.grid.dx ** (self.n_particles - 1)

    def coordinate(self, particle: int = 0) -> np.ndarray:
        """Position of one particle broadcast over the flattened configuration axis"""
        shape = [1] * self.n_particles
        shape[particle] = self.grid.n_points
        x = self.grid.x.reshape(shape)
        return np.broadcast_to(x, (self.grid.n_points,) * self.n_particles).reshape(-1)

    def with_amplitudes(self, amplitudes: np.ndarray) -> "GridWavefunction":
        return replace(self, amplitudes=amplitudes)

    def copy(self) -> "GridWavefunction":
        return self.with_amplitudes(self.amplitudes.copy())

    def select(self, index: Union[int, slice, np.ndarray]) -> "GridWavefunction":
        """Pick trajectories out of the leading batch axis"""
        return self.with_amplitudes(self.amplitudes[index])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "n_particles": self.n_particles,
            "levels": self.levels,
            "batch_shape": list(self.batch_shape),
        }


def normalize(psi: GridWavefunction) -> GridWavefunction:
    """Rescale to unit norm without touching the phase.

    Raises DegenerateStateError when ||psi|| <= 1e-30 for any trajectory in the batch.
    """
    norm = np.sqrt(psi.norm_squared())
    if np.any(norm <= MIN_NORM) or not np.all(np.isfinite(norm)):
        bad = np.flatnonzero(np.atleast_1d(~(norm > MIN_NORM)))
        raise DegenerateStateError(f"state norm vanished (batch rows {bad.tolist()})")
    scale = np.expand_dims(norm, axis=psi.state_axes) if np.ndim(norm) else norm
    return psi.with_amplitudes(psi.amplitudes / scale)


def check_norm(psi: GridWavefunction) -> None:
    deviation = np.max(np.abs(np.atleast_1d(psi.norm_squared()) - 1.0))
    if deviation > psi.norm_tolerance:
        raise DegenerateStateError(f"norm drifted by {deviation:.3e}")


def expectation_position(psi: GridWavefunction, particle: int = 0) -> Real:
    density = psi.marginal(particle)
    return np.sum(psi.grid.x * density, axis=-1) * psi.grid.dx


def spread_position(psi: GridWavefunction, particle: int = 0) -> Real:
    density = psi.marginal(particle)
    x = psi.grid.x
    mean = np.sum(x * density, axis=-1) * psi.grid.dx
    second = np.sum(x * x * density, axis=-1) * psi.grid.dx
    return np.sqrt(np.maximum(second - mean ** 2, 0.0))


def momentum_distribution(psi: GridWavefunction, particle: int = 0) -> np.ndarray:
    """Probability weights over the FFT wavenumbers of one particle, shape (*batch, n_points)"""
    axis = psi.particle_axis(particle)
    phi = np.fft.fft(psi.coordinate_view(), axis=axis)
    weights = np.abs(phi) ** 2
    weights = np.moveaxis(weights, axis, -1)
    sum_axes = tuple(range(weights.ndim - 1 - (psi.n_particles - 1) - (psi.levels > 1), weights.ndim - 1))
    if sum_axes:
        weights = np.sum(weights, axis=sum_axes)
    total = np.sum(weights, axis=-1, keepdims=True)
    return weights / total


def expectation_momentum(psi: GridWavefunction, particle: int = 0) -> Real:
    w = momentum_distribution(psi, particle)
    return HBAR * np.sum(psi.grid.k * w, axis=-1)


def spread_momentum(psi: GridWavefunction, particle: int = 0) -> Real:
    w = momentum_distribution(psi, particle)
    p = HBAR * psi.grid.k
    mean = np.sum(p * w, axis=-1)
    return np.sqrt(np.maximum(np.sum(p * p * w, axis=-1) - mean ** 2, 0.0))


def boundary_fraction(psi: GridWavefunction) -> Real:
    """Largest probability found in the outermost two cells (each side) of any particle marginal"""
    worst = None
    for n in range(psi.n_particles):
        density = psi.marginal(n)
        edge = np.sum(density[..., :BOUNDARY_CELLS], axis=-1) + np.sum(density[..., -BOUNDARY_CELLS:], axis=-1)
        frac = edge / np.sum(density, axis=-1)
        worst = frac if worst is None else np.maximum(worst, frac)
    return worst


def gaussian_from_width_parameter(grid: SpatialGrid, center: float, a: complex,
                                  momentum: float = 0.0) -> GridWavefunction:
    """psi(x) ~ exp(-a (x-center)^2 + i p (x-center)/hbar) with Re a > 0, normalized on the grid"""
    if not np.real(a) > 0:
        raise ConfigurationError(f"Gaussian width parameter needs Re(a) > 0, got {a}")
    d = grid.displacement(grid.x, center)
    amps = np.exp(-a * d * d + 1j * momentum * d / HBAR)
    return normalize(GridWavefunction(grid, amps))


def gaussian_state(grid: SpatialGrid, center: float, width: float,
                   momentum: float = 0.0) -> GridWavefunction:
    """Gaussian with position standard deviation ``width``"""
    if width <= 0:
        raise ConfigurationError(f"width must be positive, got {width}")
    return gaussian_from_width_parameter(grid, center, 1.0 / (4.0 * width * width), momentum)


def superposition(grid: SpatialGrid, centers: Sequence[float], weights: Sequence[float],
                  width: float, phases: Optional[Sequence[float]] = None) -> GridWavefunction:
    """Sum of Gaussian lobes with probability weights (exact for non-overlapping lobes)"""
    if len(centers) != len(weights):
        raise ConfigurationError("centers and weights must have equal length")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ConfigurationError("weights must be non-negative and not all zero")
    phases = phases if phases is not None else [0.0] * len(centers)
    total = np.zeros(grid.n_points, dtype=np.complex128)
    for c, w, ph in zip(centers, weights, phases):
        lobe = gaussian_state(grid, c, width).amplitudes
        total += math.sqrt(w) * np.exp(1j * ph) * lobe
    return normalize(GridWavefunction(grid, total))


def product_state(*states: GridWavefunction) -> GridWavefunction:
    """Tensor product of single-particle states on a shared grid"""
    if not states:
        raise ConfigurationError("product_state needs at least one state")
    grid = states[0].grid
    amps = states[0].amplitudes
    for s in states[1:]:
        if s.grid != grid or s.n_particles != 1 or s.batch_shape:
            raise ShapeError("product_state expects batch-free single-particle states on one grid")
        amps = np.multiply.outer(amps, s.amplitudes).reshape(-1)
    return GridWavefunction(grid, amps, n_particles=len(states))


@dataclass(frozen=True)
class CollapseParams:
    """Collapse-model constants. Units follow whatever system the values are given in."""
    grw_lambda: float
    alpha: float
    qmupl_lambda0: float
    m0: float

    def __post_init__(self):
        problems = [f"{name}: must be strictly positive (got {value})"
                    for name, value in (("grw_lambda", self.grw_lambda), ("alpha", self.alpha),
                                        ("qmupl_lambda0", self.qmupl_lambda0), ("m0", self.m0))
                    if not value > 0]
        if problems:
            raise ConfigurationError("Invalid collapse parameters", problems)

    @property
    def gamma(self) -> float:
        return csl_gamma(self.grw_lambda, self.alpha)

    @classmethod
    def si_defaults(cls) -> "CollapseParams":
        # alpha = 1e10 cm^-2 expressed in m^-2
        return cls(grw_lambda=1e-16, alpha=1e14, qmupl_lambda0=1e-2, m0=1.7e-27)

    @classmethod
    def simulation(cls, lambda_sim: float, alpha: float = 1.0, m0: float = 1.0) -> "CollapseParams":
        return cls(grw_lambda=lambda_sim, alpha=alpha, qmupl_lambda0=lambda_sim, m0=m0)

    def to_dict(self) -> Dict[str, Any]:
        return {"grw_lambda": self.grw_lambda, "alpha": self.alpha,
                "qmupl_lambda0": self.qmupl_lambda0, "m0": self.m0, "gamma": self.gamma}


def csl_gamma(grw_lambda: float, alpha: float) -> float:
    """gamma = lambda (4 pi / alpha)^(3/2)"""
    return grw_lambda * (4.0 * math.pi / alpha) ** 1.5


@dataclass(frozen=True)
class ParticleSpec:
    mass: float
    label: str = "particle"

    def __post_init__(self):
        if not self.mass > 0:
            raise ConfigurationError(f"particle '{self.label}' mass must be positive, got {self.mass}")


def coupling_constant(particle: ParticleSpec, params: CollapseParams) -> float:
    """Mass-proportional QMUPL coupling lambda_n = (m_n / m0) lambda0"""
    return particle.mass / params.m0 * params.qmupl_lambda0


def grw_rate(particle: ParticleSpec, params: CollapseParams) -> float:
    """Mass-proportional GRW jump frequency; a body of N reference masses jumps N times as often"""
    return particle.mass / params.m0 * params.grw_lambda


@dataclass
class NoiseStream:
    """Reproducible per-trajectory randomness.

    The draw sequence is a pure function of (master_seed, trajectory_index, substream) and
    the number of variates already drawn (``counter``). Distinct trajectory indices or
    substreams give statistically independent streams.
    """
    master_seed: int
    trajectory_index: int
    substream: int = 0
    counter: int = field(default=0, init=False)
    _generator: Optional[np.random.Generator] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigurationError(f"master_seed must be an unsigned 64-bit integer, got {self.master_seed}")
        if self.trajectory_index < 0 or self.substream < 0:
            raise ConfigurationError("trajectory_index and substream must be non-negative")

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence(entropy=int(self.master_seed),
                                         spawn_key=(int(self.trajectory_index), int(self.substream)))
            self._generator = np.random.Generator(np.random.PCG64(seq))
        return self._generator

    def child(self, substream: int) -> "NoiseStream":
        """Independent stream for a different purpose within the same trajectory"""
        return NoiseStream(self.master_seed, self.trajectory_index, substream)

    def wiener(self, dt: float, size: Union[int, Tuple[int, ...]]) -> np.ndarray:
        """Wiener increments with mean 0 and variance dt"""
        out = self.generator.normal(0.0, math.sqrt(dt), size)
        self.counter += int(np.prod(size))
        return out

    def exponential(self, scale: float) -> float:
        self.counter += 1
        return float(self.generator.exponential(scale))

    def uniform(self) -> float:
        self.counter += 1
        return float(self.generator.random())
