"""Master-equation integrator for ensemble-averaged collapse dynamics"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.linalg import eigvalsh

from .core import HBAR, GridWavefunction, SpatialGrid
from .errors import ConfigurationError, ShapeError, StepSizeError
from .hamiltonian import MAX_MATRIX_POINTS, HamiltonianSpec

logger = logging.getLogger(__name__)

HERMITIAN_TOLERANCE = 1e-10
TRACE_TOLERANCE = 1e-8
POSITIVITY_TOLERANCE = 1e-8
TRACE_RENORMALIZE = 1e-10
# dt * stiffness must stay inside the RK4 stability region
RK4_GUARD = 2.5


@dataclass
class DensityOperator:
    """Density matrix on a position grid (n <= 64) or on an explicit small basis"""
    matrix: np.ndarray
    grid: Optional[SpatialGrid] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.complex128)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"density matrix must be square, got shape {self.matrix.shape}")
        if self.grid is not None and self.grid.n_points != self.dimension:
            raise ShapeError(f"grid has {self.grid.n_points} points, matrix dimension is {self.dimension}")
        if self.grid is not None and self.dimension > MAX_MATRIX_POINTS:
            raise ConfigurationError(f"density matrices on grids are limited to {MAX_MATRIX_POINTS} points")
        herm = np.max(np.abs(self.matrix - self.matrix.conj().T)) if self.dimension else 0.0
        if herm > HERMITIAN_TOLERANCE:
            raise ShapeError(f"density matrix not Hermitian (deviation {herm:.3e})")
        if abs(self.trace - 1.0) > TRACE_TOLERANCE:
            raise ShapeError(f"density matrix trace {self.trace:.12g} differs from 1")

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()

    def eigenvalues(self) -> np.ndarray:
        return eigvalsh(self.matrix)

    def is_positive(self, tolerance: float = POSITIVITY_TOLERANCE) -> bool:
        return bool(np.min(self.eigenvalues()) >= -tolerance)

    @classmethod
    def pure(cls, psi: GridWavefunction) -> "DensityOperator":
        return ensemble_density([psi])

    @classmethod
    def from_vector(cls, amplitudes: np.ndarray) -> "DensityOperator":
        """Projector on a normalized vector of an explicit basis"""
        v = np.asarray(amplitudes, dtype=np.complex128)
        return cls(np.outer(v, v.conj()) / np.vdot(v, v).real)


def purity(rho: DensityOperator) -> float:
    m = rho.matrix
    return float(np.real(np.sum(m * m.T)))


def trace_distance(a: DensityOperator, b: DensityOperator) -> float:
    """Half the trace norm of the difference"""
    if a.dimension != b.dimension:
        raise ShapeError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    diff = a.matrix - b.matrix
    return 0.5 * float(np.sum(np.abs(eigvalsh(0.5 * (diff + diff.conj().T)))))


@dataclass
class LindbladGenerator:
    """d rho/dt = -(i/hbar)[H, rho] - 1/2 sum_n lambda_n [A_n, [A_n, rho]] with diagonal A_n.

    For diagonal A the double commutator is (a_i - a_j)^2 rho_ij, so the collapse part is an
    elementwise damping matrix.
    """
    hamiltonian: np.ndarray
    operators: List[np.ndarray]
    rates: List[float]
    damping: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.hamiltonian = np.asarray(self.hamiltonian, dtype=np.complex128)
        n = self.hamiltonian.shape[0]
        if self.hamiltonian.shape != (n, n):
            raise ShapeError("Hamiltonian matrix must be square")
        if len(self.operators) != len(self.rates):
            raise ConfigurationError("one rate per collapse operator required")
        if any(r < 0 for r in self.rates):
            raise ConfigurationError("collapse rates must be non-negative")
        self.damping = np.zeros((n, n))
        for a, rate in zip(self.operators, self.rates):
            a = np.real(np.asarray(a, dtype=float))
            if a.shape != (n,):
                raise ShapeError(f"collapse operators are given by their diagonal of length {n}")
            diff = a[:, None] - a[None, :]
            self.damping += 0.5 * rate * diff * diff

    @classmethod
    def for_grid(cls, grid: SpatialGrid, h: HamiltonianSpec, lambdas: Sequence[float]) -> "LindbladGenerator":
        """Single particle on a grid, collapse operator = position"""
        if h.n_particles != 1 or len(lambdas) != 1:
            raise ConfigurationError("grid master equations support a single particle")
        return cls(h.matrix(grid), [grid.x.copy()], [float(lambdas[0])])

    @property
    def dimension(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def stiffness(self) -> float:
        """Spectral radius bound of the generator"""
        spread = np.ptp(eigvalsh(self.hamiltonian)) / HBAR if self.dimension else 0.0
        return float(spread + np.max(self.damping, initial=0.0))

    def check_step(self, dt: float) -> None:
        if not dt > 0:
            raise StepSizeError(f"dt must be positive, got {dt}")
        if dt * self.stiffness >= RK4_GUARD:
            raise StepSizeError(f"dt={dt:g} outside RK4 stability: dt * stiffness = {dt * self.stiffness:.3g}")

    def rhs(self, rho: np.ndarray) -> np.ndarray:
        h = self.hamiltonian
        return -1j / HBAR * (h @ rho - rho @ h) - self.damping * rho

    def rk4(self, rho: np.ndarray, dt: float) -> np.ndarray:
        k1 = self.rhs(rho)
        k2 = self.rhs(rho + 0.5 * dt * k1)
        k3 = self.rhs(rho + 0.5 * dt * k2)
        k4 = self.rhs(rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        trace = np.real(np.trace(rho))
        if abs(trace - 1.0) > TRACE_RENORMALIZE and trace > 0:
            rho = rho / trace
        return rho


def lindblad_step(rho: DensityOperator, h: Union[HamiltonianSpec, LindbladGenerator],
                  lambdas: Sequence[float] = (), dt: float = 0.0) -> DensityOperator:
    """One RK4 step; ``h`` may be a HamiltonianSpec (grid case) or a prebuilt generator"""
    if isinstance(h, LindbladGenerator):
        generator = h
    else:
        if rho.grid is None:
            raise ConfigurationError("a HamiltonianSpec needs a grid-based density operator")
        generator = LindbladGenerator.for_grid(rho.grid, h, lambdas)
    if generator.dimension != rho.dimension:
        raise ShapeError("generator and density operator dimensions differ")
    generator.check_step(dt)
    return DensityOperator(generator.rk4(rho.matrix, dt), rho.grid)


def evolve_lindblad(rho0: DensityOperator, generator: LindbladGenerator, dt: float, n_steps: int,
                    every: int = 1) -> Tuple[np.ndarray, List[DensityOperator]]:
    """Integrate n_steps RK4 steps; returns the times and states at every ``every``-th step and the last"""
    generator.check_step(dt)
    if generator.dimension != rho0.dimension:
        raise ShapeError("generator and density operator dimensions differ")
    rho = rho0.matrix.copy()
    times, states = [0.0], [rho0]
    for step in range(1, n_steps + 1):
        rho = generator.rk4(rho, dt)
        if step % every == 0 or step == n_steps:
            times.append(step * dt)
            states.append(DensityOperator(rho.copy(), rho0.grid))
    if not states[-1].is_positive():
        lowest = float(np.min(states[-1].eigenvalues()))
        logger.warning(f"Master-equation state lost positivity (min eigenvalue {lowest:.3e}); reduce dt")
    logger.debug(f"Integrated master equation: dim={rho0.dimension}, steps={n_steps}")
    return np.asarray(times), states


def ensemble_density(trajectories: Sequence[GridWavefunction]) -> DensityOperator:
    """Average projector over trajectories (batched states count each row)"""
    if not trajectories:
        raise ConfigurationError("ensemble_density needs at least one state")
    grid = trajectories[0].grid
    total = np.zeros((grid.n_points, grid.n_points), dtype=np.complex128)
    count = 0
    for psi in trajectories:
        if psi.grid != grid:
            raise ShapeError("all states must live on the same grid")
        if psi.n_particles != 1 or psi.levels != 1:
            raise ShapeError("ensemble_density supports single-particle states without internal levels")
        rows = psi.amplitudes.reshape(-1, grid.n_points)
        total += rows.T @ rows.conj() * grid.dx
        count += rows.shape[0]
    rho = total / count
    rho = 0.5 * (rho + rho.conj().T)
    return DensityOperator(rho / np.real(np.trace(rho)), grid)


def coherence_decay_rate(separation: float, lam: float) -> float:
    """(lambda/2) d^2, decay rate of rho(x, x') with |x - x'| = d when H = 0"""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return 0.5 * lam * separation ** 2


def coherence_closed_form(rho0: DensityOperator, lam: float, t: float,
                          positions: Optional[np.ndarray] = None) -> DensityOperator:
    """rho(x, x', t) = rho(x, x', 0) exp(-(lambda/2)(x - x')^2 t), exact for H = 0"""
    x = positions if positions is not None else (rho0.grid.x if rho0.grid is not None else None)
    if x is None:
        raise ConfigurationError("positions are required for a density operator without grid")
    d = x[:, None] - x[None, :]
    return DensityOperator(rho0.matrix * np.exp(-0.5 * lam * d * d * t), rho0.grid)


def momentum_matrix(grid: SpatialGrid) -> np.ndarray:
    """Spectral momentum operator on a periodic grid"""
    eye = np.eye(grid.n_points)
    p = np.fft.ifft(HBAR * grid.k[:, None] * np.fft.fft(eye, axis=0), axis=0)
    return 0.5 * (p + p.conj().T)


def lindblad_observables(rho: DensityOperator, h: HamiltonianSpec) -> Dict[str, float]:
    """Observables that are linear in rho: Tr(rho q), Tr(rho p), Tr(rho H), Tr(rho q^2)"""
    if rho.grid is None:
        raise ConfigurationError("grid observables need a grid-based density operator")
    grid = rho.grid
    m = rho.matrix
    x = grid.x
    populations = np.real(np.diag(m))
    return {
        "mean_q": float(np.sum(populations * x)),
        "mean_p": float(np.real(np.trace(m @ momentum_matrix(grid)))),
        "energy": float(np.real(np.trace(m @ h.matrix(grid)))),
        "second_q": float(np.sum(populations * x * x)),
    }


def lindblad_series(rho0: DensityOperator, h: HamiltonianSpec, lambdas: Sequence[float], dt: float,
                    n_steps: int, every: int = 1) -> Tuple[np.ndarray, Dict[str, np.ndarray], List[DensityOperator]]:
    """Observable series of the grid master equation, aligned with trajectory output steps"""
    generator = LindbladGenerator.for_grid(rho0.grid, h, lambdas)
    times, states = evolve_lindblad(rho0, generator, dt, n_steps, every)
    observed = [lindblad_observables(s, h) for s in states]
    series = {name: np.asarray([o[name] for o in observed]) for name in observed[0]}
    return times, series, states


def to_rows(rho: DensityOperator) -> List[Dict[str, Any]]:
    """(i, j, re, im) rows for CSV export"""
    n = rho.dimension
    return [{"i": i, "j": j, "re": float(rho.matrix[i, j].real), "im": float(rho.matrix[i, j].imag)}
            for i in range(n) for j in range(n)]
