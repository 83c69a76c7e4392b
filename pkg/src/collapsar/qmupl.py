"""QMUPL stochastic Schrodinger integrator, centre-of-mass reduction and Gaussian-state solutions"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple
import cmath
import logging
import math

import numpy as np
from scipy.integrate import solve_ivp

from .classifier import BasinTracker, binomial_summary
from .core import (
    BOUNDARY_TOLERANCE,
    HBAR,
    GridWavefunction,
    NoiseStream,
    ParticleSpec,
    SpatialGrid,
    expectation_position,
    gaussian_from_width_parameter,
    normalize,
    spread_position,
)
from .errors import ConfigurationError, DegenerateStateError, StepSizeError
from .hamiltonian import MAX_MATRIX_POINTS, ComovingFrame, HamiltonianKind, HamiltonianSpec, SplitStepPropagator
from .lindblad import DensityOperator
from .sampling import (
    GRID_OBSERVABLES,
    SeriesRecorder,
    TrajectoryLog,
    TrajectorySampler,
    max_boundary_fraction,
    observe,
    output_steps,
)

logger = logging.getLogger(__name__)

# dt <= MARGIN / max(lambda_n * l^2)
MARGIN = 1e-2
# max(lambda_n) * L^2 * dt must stay below this for the Euler factor to stay positive
STABILITY_BOUND = 2.0


def mass_proportional_rates(particles: Sequence[ParticleSpec], lambda0: float, m0: float = 1.0) -> List[float]:
    """lambda_n = (m_n / m0) lambda0 for every particle"""
    return [p.mass / m0 * lambda0 for p in particles]


def check_step_size(grid: SpatialGrid, lambdas: Sequence[float], dt: float,
                    guard_length: Optional[float] = None, margin: float = MARGIN) -> None:
    """Raise StepSizeError unless dt satisfies both collapse-term guards.

    The accuracy guard uses ``guard_length`` (default: box half-width) as the largest
    relevant |q - <q>|; the stability guard always uses the box half-width.
    """
    if not dt > 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    lam_max = max(lambdas, default=0.0)
    if lam_max <= 0:
        return
    half = grid.half_width
    if lam_max * half ** 2 * dt >= STABILITY_BOUND:
        raise StepSizeError(f"dt={dt:g} violates lambda*L^2*dt < {STABILITY_BOUND} "
                            f"(lambda={lam_max:g}, L={half:g})")
    ell = half if guard_length is None else guard_length
    limit = margin / (lam_max * ell ** 2)
    if dt > limit * (1.0 + 1e-9):
        raise StepSizeError(f"dt={dt:g} exceeds collapse-term guard {limit:.3g} "
                            f"(lambda={lam_max:g}, guard length={ell:g})")


@dataclass
class QmuplConfig:
    """One QMUPL problem: particles on a grid with mass-proportional collapse rates"""
    grid: SpatialGrid
    particles: List[ParticleSpec]
    lambda0_sim: float
    dt: float
    horizon: float
    initial_state: GridWavefunction
    hamiltonian: Optional[HamiltonianSpec] = None
    output_every: int = 1
    m0: float = 1.0
    guard_length: Optional[float] = None
    comoving: bool = False
    born_centers: Optional[Tuple[float, float]] = None
    hold_steps: int = 100

    def __post_init__(self):
        if self.hamiltonian is None:
            self.hamiltonian = HamiltonianSpec.free(*[p.mass for p in self.particles])

    @property
    def lambdas(self) -> List[float]:
        return mass_proportional_rates(self.particles, self.lambda0_sim, self.m0)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def validate(self) -> None:
        problems = []
        if self.lambda0_sim < 0:
            problems.append(f"lambda0_sim: must be >= 0 (got {self.lambda0_sim})")
        if not self.particles:
            problems.append("particles: at least one particle required")
        if self.dt <= 0 or self.horizon <= 0:
            problems.append("dt and horizon must be positive")
        elif abs(self.n_steps * self.dt - self.horizon) > 1e-9 * self.horizon:
            problems.append(f"horizon/dt must be an integer (got {self.horizon / self.dt:.6g})")
        if self.output_every < 1:
            problems.append("output_every: must be >= 1")
        if self.initial_state.grid != self.grid:
            problems.append("initial_state: lives on a different grid")
        if self.initial_state.n_particles != len(self.particles):
            problems.append("initial_state: particle count differs from particles")
        if self.initial_state.batch_shape:
            problems.append("initial_state: must be a single (unbatched) state")
        if self.hamiltonian.n_particles != len(self.particles):
            problems.append("hamiltonian: particle count differs from particles")
        if self.comoving and len(self.particles) != 1:
            problems.append("comoving: only available for a single particle")
        if problems:
            raise ConfigurationError("Invalid QMUPL configuration", problems)
        check_step_size(self.grid, self.lambdas, self.dt, self.guard_length)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "masses": [p.mass for p in self.particles],
            "lambda0_sim": self.lambda0_sim,
            "lambdas": self.lambdas,
            "dt": self.dt,
            "horizon": self.horizon,
            "hamiltonian": self.hamiltonian.to_dict(),
            "output_every": self.output_every,
            "guard_length": self.guard_length,
            "comoving": self.comoving,
        }


def advance_state(psi: GridWavefunction, propagator: Optional[SplitStepPropagator], lambdas: Sequence[float],
             coordinates: Sequence[np.ndarray], dW: np.ndarray, dt: float,
             k_shift: Optional[np.ndarray] = None) -> Tuple[GridWavefunction, np.ndarray]:
    """Collapse factor with <q_n> frozen at the step start, unitary step, projection back to unit norm"""
    amps = psi.amplitudes
    factor = None
    for n, lam in enumerate(lambdas):
        if lam == 0:
            continue
        mean = np.asarray(expectation_position(psi, n))
        u = coordinates[n] - mean[..., None]
        term = math.sqrt(lam) * u * dW[..., n, None] - 0.5 * lam * u * u * dt
        factor = 1.0 + term if factor is None else factor + term
    if factor is not None:
        if psi.levels > 1:
            factor = factor[..., None, :]
        amps = amps * factor
    psi = psi.with_amplitudes(amps)
    if propagator is not None:
        psi = propagator.apply(psi, k_shift)
    drift = np.abs(psi.norm_squared() - 1.0)
    return normalize(psi), drift


def _propagator(grid: SpatialGrid, h: HamiltonianSpec, dt: float) -> Optional[SplitStepPropagator]:
    return None if h.kind == HamiltonianKind.NONE else SplitStepPropagator(grid, h, dt)


def qmupl_step(psi: GridWavefunction, h: HamiltonianSpec, lambdas: Sequence[float], dW: np.ndarray,
               dt: float, guard_length: Optional[float] = None) -> GridWavefunction:
    """One Euler-Maruyama step of the QMUPL equation followed by normalization.

    ``dW`` holds one Wiener increment per particle (trailing axis), with leading batch axes
    matching ``psi``.
    """
    check_step_size(psi.grid, lambdas, dt, guard_length)
    coordinates = [psi.coordinate(n) for n in range(psi.n_particles)]
    return advance_state(psi, _propagator(psi.grid, h, dt), lambdas, coordinates, np.asarray(dW, dtype=float), dt)[0]


def integrate_batch(config: QmuplConfig, increments: np.ndarray, indices: Optional[Sequence[int]] = None,
                    densities: Optional[np.ndarray] = None) -> Tuple[Dict[str, np.ndarray], List[Dict[str, Any]], int]:
    """Integrate one block of trajectories from pre-drawn increments of shape (batch, n_steps, n_particles).

    ``densities`` (n_times, n_points, n_points), if given, accumulates the unnormalized sum of
    projectors at every output time.
    """
    if densities is not None and (config.comoving or len(config.particles) != 1):
        raise ConfigurationError("density accumulation needs a single particle in the fixed frame")
    batch = increments.shape[0]
    indices = list(indices) if indices is not None else list(range(batch))
    grid, h, dt = config.grid, config.hamiltonian, config.dt
    amps0 = config.initial_state.amplitudes
    psi = config.initial_state.with_amplitudes(np.broadcast_to(amps0, (batch,) + amps0.shape).copy())
    propagator = _propagator(grid, h, dt)
    frame = ComovingFrame(grid, h, (batch,)) if config.comoving else None
    coordinates = [psi.coordinate(n) for n in range(psi.n_particles)]
    lambdas = config.lambdas

    steps = output_steps(config.n_steps, config.output_every)
    out_set = set(steps)
    recorder = SeriesRecorder(GRID_OBSERVABLES, batch, len(steps))
    tracker = None
    if config.born_centers is not None:
        separation = abs(config.born_centers[1] - config.born_centers[0])
        tracker = BasinTracker(config.born_centers, 0.5 * separation, config.hold_steps, (batch,))
    boundary = np.zeros(batch)
    drift = np.zeros(batch)

    def snapshot():
        x_off = frame.x_offset if frame else 0.0
        k_off = frame.k_offset if frame else None
        if densities is not None:
            rows = psi.amplitudes
            densities[recorder.cursor] += rows.T @ rows.conj() * grid.dx
        recorder.record(observe(psi, h, x_off, k_off, drift))
        return np.maximum(boundary, max_boundary_fraction(psi))

    boundary = snapshot()
    for step in range(1, config.n_steps + 1):
        k_shift = frame.k_offset if frame else None
        psi, drift = advance_state(psi, propagator, lambdas, coordinates, increments[:, step - 1, :], dt, k_shift)
        if frame:
            psi = frame.recenter(psi)
        if tracker is not None:
            x_off = frame.x_offset if frame else 0.0
            sigma = spread_position(psi)
            tracker.update(expectation_position(psi) + x_off, sigma < 0.1 * separation)
        if step in out_set:
            boundary = snapshot()

    records: List[Dict[str, Any]] = []
    if tracker is not None:
        outcomes = tracker.outcomes()
        for row, i in enumerate(indices):
            records.append({"index": int(i), "basin": int(outcomes[row]),
                            "classified_step": int(tracker.first_classified_step[row]),
                            "max_boundary_fraction": float(boundary[row])})
    flags = int(np.sum(boundary > BOUNDARY_TOLERANCE))
    return recorder.result(), records, flags


def run_qmupl_trajectory(config: QmuplConfig, noise: NoiseStream) -> TrajectoryLog:
    """Integrate one trajectory; deterministic given the noise stream"""
    config.validate()
    increments = noise.wiener(config.dt, (config.n_steps, len(config.particles)))[None]
    series, _, _ = integrate_batch(config, increments, [noise.trajectory_index])
    times = np.asarray(output_steps(config.n_steps, config.output_every), dtype=float) * config.dt
    return TrajectoryLog(times, {name: values[0] for name, values in series.items()})


class QmuplSampler(TrajectorySampler):
    """Ensemble adapter for grid QMUPL trajectories"""
    model = "qmupl"

    def __init__(self, config: QmuplConfig):
        config.validate()
        self.config = config

    @property
    def times(self) -> np.ndarray:
        return np.asarray(output_steps(self.config.n_steps, self.config.output_every), dtype=float) * self.config.dt

    def simulate(self, indices, master_seed):
        c = self.config
        increments = np.stack([NoiseStream(master_seed, i).wiener(c.dt, (c.n_steps, len(c.particles)))
                               for i in indices])
        return integrate_batch(c, increments, indices)

    def density_series(self, n: int, master_seed: int, chunk_size: int = 64) -> List[DensityOperator]:
        """Ensemble density operator at every output time, averaged over trajectories 0..n-1"""
        c = self.config
        size = c.grid.n_points
        if size > MAX_MATRIX_POINTS:
            raise ConfigurationError(f"density operators are limited to {MAX_MATRIX_POINTS}-point grids")
        sums = np.zeros((len(self.times), size, size), dtype=np.complex128)
        for start in range(0, n, chunk_size):
            indices = list(range(start, min(start + chunk_size, n)))
            increments = np.stack([NoiseStream(master_seed, i).wiener(c.dt, (c.n_steps, 1)) for i in indices])
            integrate_batch(c, increments, indices, densities=sums)
        states = []
        for total in sums:
            rho = 0.5 * (total + total.conj().T) / n
            states.append(DensityOperator(rho / np.real(np.trace(rho)), c.grid))
        return states

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model, **self.config.to_dict()}


def born_statistics(records: Sequence[Dict[str, Any]], weights: Sequence[float]) -> Dict[str, Any]:
    """Frequencies of each basin against the initial lobe weights, plus the indeterminate count"""
    total = len(records)
    basins = [r["basin"] for r in records]
    summary = {"total": total, "indeterminate": sum(1 for b in basins if b < 0), "basins": []}
    for k, w in enumerate(weights):
        summary["basins"].append(binomial_summary(sum(1 for b in basins if b == k), total, w))
    return summary


# Centre-of-mass reduction

@dataclass(frozen=True)
class ComSplit:
    """Centre-of-mass and relative-motion parameters of a composite body"""
    total_mass: float
    lambda_cm: float
    masses: Tuple[float, ...]
    lambdas: Tuple[float, ...]
    reduced_mass: Optional[float] = None
    lambda_rel: Optional[float] = None

    @property
    def com_particle(self) -> ParticleSpec:
        return ParticleSpec(self.total_mass, label="com")

    def com_config(self, grid: SpatialGrid, dt: float, horizon: float, initial_state: GridWavefunction,
                   omega: float = 0.0, **kwargs) -> QmuplConfig:
        """Effective single-particle problem for the centre of mass (mass M, rate lambda_cm)"""
        h = (HamiltonianSpec.harmonic(omega, self.total_mass) if omega > 0
             else HamiltonianSpec.free(self.total_mass))
        return QmuplConfig(grid=grid, particles=[self.com_particle], lambda0_sim=self.lambda_cm,
                           m0=self.total_mass, dt=dt, horizon=horizon, initial_state=initial_state,
                           hamiltonian=h, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {"total_mass": self.total_mass, "lambda_cm": self.lambda_cm,
                "reduced_mass": self.reduced_mass, "lambda_rel": self.lambda_rel,
                "n_particles": len(self.masses)}


def com_split(particles: Sequence[ParticleSpec], lambda0: float, m0: float = 1.0) -> ComSplit:
    """Split N particles with mass-proportional rates into centre of mass and relative motion.

    lambda_cm is the plain sum of the lambda_n; for two particles the relative coordinate
    carries the reduced mass and lambda_rel = (mu / m0) lambda0.
    """
    if not particles:
        raise ConfigurationError("com_split needs at least one particle")
    masses = tuple(p.mass for p in particles)
    lambdas = tuple(mass_proportional_rates(particles, lambda0, m0))
    total = math.fsum(masses)
    reduced = lambda_rel = None
    if len(masses) == 2:
        reduced = masses[0] * masses[1] / total
        lambda_rel = reduced / m0 * lambda0
    return ComSplit(total, math.fsum(lambdas), masses, lambdas, reduced, lambda_rel)


def com_spread(psi: GridWavefunction, masses: Sequence[float]) -> Tuple[float, float]:
    """Mean and standard deviation of the centre-of-mass coordinate"""
    if len(masses) != psi.n_particles:
        raise ConfigurationError("one mass per particle required")
    total = math.fsum(masses)
    q = sum(m * psi.coordinate(n) for n, m in enumerate(masses)) / total
    density = np.abs(psi.amplitudes) ** 2
    weight = density / np.sum(density, axis=-1, keepdims=True)
    mean = np.sum(q * weight, axis=-1)
    var = np.sum(q * q * weight, axis=-1) - mean ** 2
    return mean, np.sqrt(np.maximum(var, 0.0))


# Gaussian solutions

def stationary_width_parameter(lam: float, mass: float, omega: float = 0.0) -> complex:
    """Fixed point of da/dt = lambda - (2i hbar/m) a^2 + i m omega^2/(2 hbar) with Re a > 0"""
    if lam <= 0 and omega <= 0:
        raise ConfigurationError("a stationary width needs lambda > 0 or omega > 0")
    a2 = mass * (lam + 1j * mass * omega ** 2 / (2 * HBAR)) / (2j * HBAR)
    a = cmath.sqrt(a2)
    return a if a.real > 0 else -a


def stationary_width(lam: float, mass: float) -> float:
    """Asymptotic position spread of a free Gaussian: (hbar/(lambda m))^(1/4) / sqrt(2)"""
    return (HBAR / (lam * mass)) ** 0.25 / math.sqrt(2.0)


def stationary_covariance() -> float:
    """Asymptotic symmetrized q-p covariance of a free Gaussian"""
    return HBAR / 2.0


def width_moments(a) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sigma_q^2, C_qp, sigma_p^2) of psi ~ exp(-a x^2 + ...)"""
    a = np.asarray(a, dtype=complex)
    ar = a.real
    return 1.0 / (4.0 * ar), -HBAR * a.imag / (2.0 * ar), HBAR ** 2 * np.abs(a) ** 2 / ar


def gaussian_width_oracle(a0: complex, lam: float, mass: float, omega: float, t: Sequence[float]) -> np.ndarray:
    """Width parameter a(t) of a Gaussian solution, from the deterministic Riccati equation"""
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return np.zeros(0, dtype=complex)
    if np.any(np.diff(t) < 0) or t[0] < 0:
        raise ConfigurationError("oracle times must be non-negative and sorted")
    if t[-1] == 0:
        return np.full(t.shape, complex(a0))

    def rhs(_, y):
        a = y[0] + 1j * y[1]
        da = lam - 2j * HBAR / mass * a * a + 1j * mass * omega ** 2 / (2 * HBAR)
        return [da.real, da.imag]

    sol = solve_ivp(rhs, (0.0, float(t[-1])), [complex(a0).real, complex(a0).imag], t_eval=t,
                    method="DOP853", rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise DegenerateStateError(f"width equation failed: {sol.message}")
    return sol.y[0] + 1j * sol.y[1]


def stationary_gaussian(grid: SpatialGrid, center: float, mass: float, lam: float,
                        momentum: float = 0.0, omega: float = 0.0) -> GridWavefunction:
    """The stationary complex-width Gaussian, used as a pointer ready state"""
    return gaussian_from_width_parameter(grid, center, stationary_width_parameter(lam, mass, omega), momentum)


def make_output_times(horizon: float, n_outputs: int, spacing: str = "linear",
                      t_min: Optional[float] = None) -> np.ndarray:
    """Output times starting at 0; ``log`` spacing is geometric from t_min to the horizon"""
    if horizon <= 0 or n_outputs < 1:
        raise ConfigurationError("horizon and n_outputs must be positive")
    if spacing == "linear":
        return np.linspace(0.0, horizon, n_outputs + 1)
    if spacing == "log":
        start = t_min if t_min is not None else horizon * 1e-4
        return np.concatenate([[0.0], np.geomspace(start, horizon, n_outputs)])
    raise ConfigurationError(f"unknown spacing '{spacing}'")


@dataclass
class GaussianConfig:
    """Gaussian-state QMUPL problem for free or harmonic H.

    ``width0`` = None starts from the stationary width parameter.
    """
    mass: float = 1.0
    lambda_sim: float = 1.0
    omega: float = 0.0
    q0: float = 0.0
    p0: float = 0.0
    width0: Optional[float] = None
    horizon: float = 1.0
    n_outputs: int = 100
    spacing: str = "linear"
    t_min: Optional[float] = None
    substeps: int = 20

    def validate(self) -> None:
        problems = []
        if self.mass <= 0:
            problems.append("mass: must be positive")
        if self.lambda_sim < 0:
            problems.append("lambda_sim: must be >= 0")
        if self.omega < 0:
            problems.append("omega: must be >= 0")
        if self.width0 is not None and self.width0 <= 0:
            problems.append("width0: must be positive")
        if self.width0 is None and self.lambda_sim == 0 and self.omega == 0:
            problems.append("width0: required when lambda_sim and omega are both zero")
        if self.substeps < 1:
            problems.append("substeps: must be >= 1")
        if problems:
            raise ConfigurationError("Invalid Gaussian configuration", problems)

    @property
    def a0(self) -> complex:
        if self.width0 is not None:
            return complex(1.0 / (4.0 * self.width0 ** 2))
        return stationary_width_parameter(self.lambda_sim, self.mass, self.omega)

    @property
    def output_times(self) -> np.ndarray:
        return make_output_times(self.horizon, self.n_outputs, self.spacing, self.t_min)

    @property
    def fine_times(self) -> np.ndarray:
        out = self.output_times
        pieces = [np.linspace(out[j], out[j + 1], self.substeps + 1)[:-1] for j in range(len(out) - 1)]
        return np.concatenate(pieces + [out[-1:]])

    def to_dict(self) -> Dict[str, Any]:
        return {"mass": self.mass, "lambda_sim": self.lambda_sim, "omega": self.omega, "q0": self.q0,
                "p0": self.p0, "width0": self.width0, "horizon": self.horizon, "n_outputs": self.n_outputs,
                "spacing": self.spacing, "t_min": self.t_min, "substeps": self.substeps}


def integrate_gaussian(config: GaussianConfig, normals: np.ndarray) -> Dict[str, np.ndarray]:
    """Means follow linear SDEs driven by the deterministic width; ``normals`` is (batch, n_fine - 1)"""
    fine = config.fine_times
    a = gaussian_width_oracle(config.a0, config.lambda_sim, config.mass, config.omega, fine)
    var_q, cov, var_p = width_moments(a)
    m, w, lam = config.mass, config.omega, config.lambda_sim
    batch = normals.shape[0]
    q = np.full(batch, float(config.q0))
    p = np.full(batch, float(config.p0))
    n_out = len(config.output_times)
    recorder = SeriesRecorder(GRID_OBSERVABLES, batch, n_out)
    gain = 2.0 * math.sqrt(lam)

    def snapshot(k):
        energy = (p * p + var_p[k]) / (2 * m) + 0.5 * m * w * w * (q * q + var_q[k])
        recorder.record({"mean_q": q, "mean_p": p, "sigma_q": np.full(batch, math.sqrt(var_q[k])),
                         "sigma_p": np.full(batch, math.sqrt(var_p[k])), "energy": energy,
                         "norm_drift": np.zeros(batch)})

    snapshot(0)
    for k in range(len(fine) - 1):
        h = fine[k + 1] - fine[k]
        dW = normals[:, k] * math.sqrt(h)
        q, p = (q + p / m * h + gain * var_q[k] * dW,
                p - m * w * w * q * h + gain * cov[k] * dW)
        if (k + 1) % config.substeps == 0:
            snapshot(k + 1)
    return recorder.result()


def run_gaussian_trajectory(config: GaussianConfig, noise: NoiseStream) -> TrajectoryLog:
    config.validate()
    normals = noise.wiener(1.0, len(config.fine_times) - 1)[None]
    series = integrate_gaussian(config, normals)
    return TrajectoryLog(config.output_times, {name: v[0] for name, v in series.items()})


class GaussianSampler(TrajectorySampler):
    """Ensemble adapter for Gaussian-state trajectories (cheap long horizons)"""
    model = "gaussian"

    def __init__(self, config: GaussianConfig):
        config.validate()
        self.config = config

    @property
    def times(self) -> np.ndarray:
        return self.config.output_times

    def simulate(self, indices, master_seed):
        n = len(self.config.fine_times) - 1
        normals = np.stack([NoiseStream(master_seed, i).wiener(1.0, n) for i in indices])
        return integrate_gaussian(self.config, normals), [], 0

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model, **self.config.to_dict()}


def stationary_mean_variance(t, lam: float, mass: float) -> np.ndarray:
    """V[<q>_t] for a free particle started in the stationary Gaussian:
    4 lambda [sigma^4 t + sigma^2 C t^2 / m + C^2 t^3 / (3 m^2)]"""
    t = np.asarray(t, dtype=float)
    var_q = stationary_width(lam, mass) ** 2
    cov = stationary_covariance()
    return 4.0 * lam * (var_q ** 2 * t + var_q * cov * t ** 2 / mass + cov ** 2 * t ** 3 / (3.0 * mass ** 2))


def variance_crossover_time(lam: float, mass: float) -> float:
    """Time at which the linear and cubic terms of V[<q>_t] are equal"""
    return math.sqrt(3.0) * mass * stationary_width(lam, mass) ** 2 / stationary_covariance()
