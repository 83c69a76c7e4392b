"""Hamiltonians and split-step spectral Schrodinger propagation on periodic grids"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple
import logging

import numpy as np

from .core import (
    HBAR,
    GridWavefunction,
    SpatialGrid,
    expectation_momentum,
    expectation_position,
)
from .errors import ConfigurationError, ShapeError, StepSizeError

logger = logging.getLogger(__name__)

# dt * max kinetic eigenvalue must stay below this
KINETIC_GUARD = 0.5
MAX_MATRIX_POINTS = 64


class HamiltonianKind(Enum):
    NONE = "none"
    FREE = "free"
    HARMONIC = "harmonic"
    LINEAR = "linear_potential"
    MEASUREMENT = "measurement_coupling"


@dataclass(frozen=True)
class HamiltonianSpec:
    """Immutable description of H; one mass per particle.

    ``g`` is the field strength of the linear potential V = m g x. For the measurement
    coupling the pointer (a single particle) feels kappa * s * p where s runs over
    ``micro_eigenvalues`` of the two-level micro system.
    """
    kind: HamiltonianKind
    masses: Tuple[float, ...] = (1.0,)
    omega: float = 0.0
    g: float = 0.0
    coupling: float = 0.0
    micro_eigenvalues: Tuple[float, ...] = (1.0, -1.0)

    def __post_init__(self):
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        object.__setattr__(self, "micro_eigenvalues", tuple(float(s) for s in self.micro_eigenvalues))
        problems = []
        if not self.masses or any(m <= 0 for m in self.masses):
            problems.append(f"masses: must all be positive (got {self.masses})")
        if self.omega < 0:
            problems.append(f"omega: must be >= 0 (got {self.omega})")
        if not np.isfinite(self.coupling):
            problems.append("coupling: must be finite")
        if self.kind == HamiltonianKind.MEASUREMENT and len(self.masses) != 1:
            problems.append("measurement coupling acts on a single pointer coordinate")
        if problems:
            raise ConfigurationError("Invalid Hamiltonian", problems)

    @classmethod
    def none(cls, n_particles: int = 1) -> "HamiltonianSpec":
        return cls(HamiltonianKind.NONE, masses=(1.0,) * n_particles)

    @classmethod
    def free(cls, *masses: float) -> "HamiltonianSpec":
        return cls(HamiltonianKind.FREE, masses=masses or (1.0,))

    @classmethod
    def harmonic(cls, omega: float, *masses: float) -> "HamiltonianSpec":
        return cls(HamiltonianKind.HARMONIC, masses=masses or (1.0,), omega=omega)

    @classmethod
    def linear(cls, g: float, *masses: float) -> "HamiltonianSpec":
        return cls(HamiltonianKind.LINEAR, masses=masses or (1.0,), g=g)

    @classmethod
    def measurement(cls, coupling: float, mass: float,
                    micro_eigenvalues: Tuple[float, ...] = (1.0, -1.0)) -> "HamiltonianSpec":
        return cls(HamiltonianKind.MEASUREMENT, masses=(mass,), coupling=coupling,
                   micro_eigenvalues=micro_eigenvalues)

    @property
    def n_particles(self) -> int:
        return len(self.masses)

    @property
    def translation_invariant(self) -> bool:
        return self.kind in (HamiltonianKind.NONE, HamiltonianKind.FREE)

    def without_coupling(self) -> "HamiltonianSpec":
        """The pointer Hamiltonian once the coupling window has closed; the micro levels are kept"""
        if self.kind != HamiltonianKind.MEASUREMENT:
            return self
        return replace(self, coupling=0.0)

    def kinetic_spectrum(self, grid: SpatialGrid, k_shift: Optional[np.ndarray] = None) -> np.ndarray:
        """Kinetic energy on the FFT momentum grid.

        Shape ``(n,)*k`` in general, ``(levels, n)`` for the measurement coupling.
        ``k_shift`` (single particle only) holds one wavenumber offset per trajectory and
        prepends the batch shape to the result.
        """
        if self.kind == HamiltonianKind.NONE:
            shape = (grid.n_points,) * self.n_particles
            return np.zeros(shape if k_shift is None else np.shape(k_shift) + shape)
        if k_shift is not None:
            if self.n_particles != 1:
                raise ShapeError("momentum offsets are supported for single-particle Hamiltonians only")
            k = grid.k + np.asarray(k_shift, dtype=float)[..., None]
            total = (HBAR * k) ** 2 / (2.0 * self.masses[0])
        else:
            k = grid.k
            total = np.zeros((grid.n_points,) * self.n_particles)
            for n, m in enumerate(self.masses):
                shape = [1] * self.n_particles
                shape[n] = grid.n_points
                total = total + (HBAR * k.reshape(shape)) ** 2 / (2.0 * m)
        if self.kind == HamiltonianKind.MEASUREMENT:
            s = np.asarray(self.micro_eigenvalues)[:, None]
            return total[..., None, :] + self.coupling * s * HBAR * k[..., None, :]
        return total

    def potential(self, grid: SpatialGrid) -> Optional[np.ndarray]:
        """Potential over the flattened configuration axis, or None when V = 0"""
        if self.kind == HamiltonianKind.HARMONIC:
            per_particle = [0.5 * m * self.omega ** 2 * grid.x ** 2 for m in self.masses]
        elif self.kind == HamiltonianKind.LINEAR:
            per_particle = [m * self.g * grid.x for m in self.masses]
        else:
            return None
        total = np.zeros((grid.n_points,) * self.n_particles)
        for n, v in enumerate(per_particle):
            shape = [1] * self.n_particles
            shape[n] = grid.n_points
            total = total + v.reshape(shape)
        return total.reshape(-1)

    def matrix(self, grid: SpatialGrid) -> np.ndarray:
        """Dense single-particle H on grids of at most 64 points"""
        if self.n_particles != 1 or self.kind == HamiltonianKind.MEASUREMENT:
            raise ShapeError("dense matrices are available for single-particle Hamiltonians only")
        if grid.n_points > MAX_MATRIX_POINTS:
            raise ShapeError(f"dense matrices are limited to {MAX_MATRIX_POINTS} grid points")
        eye = np.eye(grid.n_points, dtype=np.complex128)
        t = self.kinetic_spectrum(grid)
        h = np.fft.ifft(t[:, None] * np.fft.fft(eye, axis=0), axis=0)
        v = self.potential(grid)
        if v is not None:
            h = h + np.diag(v)
        return 0.5 * (h + h.conj().T)

    def classical_path(self, q0: float, p0: float, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Closed-form (q, p) of particle 0 under Hamilton's equations"""
        t = np.asarray(t, dtype=float)
        m = self.masses[0]
        if self.kind == HamiltonianKind.NONE:
            return np.full_like(t, q0), np.full_like(t, p0)
        if self.kind == HamiltonianKind.FREE:
            return q0 + p0 * t / m, np.full_like(t, p0)
        if self.kind == HamiltonianKind.HARMONIC:
            w = self.omega
            if w == 0:
                return q0 + p0 * t / m, np.full_like(t, p0)
            q = q0 * np.cos(w * t) + p0 / (m * w) * np.sin(w * t)
            p = p0 * np.cos(w * t) - m * w * q0 * np.sin(w * t)
            return q, p
        if self.kind == HamiltonianKind.LINEAR:
            return q0 + p0 * t / m - 0.5 * self.g * t ** 2, p0 - m * self.g * t
        raise ConfigurationError(f"no closed-form path for {self.kind.value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "masses": list(self.masses),
            "omega": self.omega,
            "g": self.g,
            "coupling": self.coupling,
            "micro_eigenvalues": list(self.micro_eigenvalues),
        }


def max_kinetic_eigenvalue(grid: SpatialGrid, h: HamiltonianSpec) -> float:
    return float(np.max(np.abs(h.kinetic_spectrum(grid))))


class SplitStepPropagator:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2), phases precomputed"""

    def __init__(self, grid: SpatialGrid, h: HamiltonianSpec, dt: float):
        if not dt > 0:
            raise StepSizeError(f"dt must be positive, got {dt}")
        t_max = max_kinetic_eigenvalue(grid, h)
        if dt * t_max >= KINETIC_GUARD:
            raise StepSizeError(
                f"dt={dt:g} too large: dt * max kinetic eigenvalue = {dt * t_max:.3g} >= {KINETIC_GUARD}")
        self.grid = grid
        self.h = h
        self.dt = dt
        self.kinetic_phase = np.exp(-1j * h.kinetic_spectrum(grid) * dt / HBAR)
        v = h.potential(grid)
        self.half_potential_phase = None if v is None else np.exp(-0.5j * v * dt / HBAR)

    def apply(self, psi: GridWavefunction, k_shift: Optional[np.ndarray] = None) -> GridWavefunction:
        """Advance by dt; ``k_shift`` carries per-trajectory momentum offsets of a comoving frame"""
        if psi.n_particles != self.h.n_particles:
            raise ShapeError(f"Hamiltonian has {self.h.n_particles} particles, state has {psi.n_particles}")
        expected_levels = len(self.h.micro_eigenvalues) if self.h.kind == HamiltonianKind.MEASUREMENT else 1
        if psi.levels != expected_levels:
            raise ShapeError(f"Hamiltonian expects {expected_levels} internal levels, state has {psi.levels}")
        if k_shift is not None and np.any(k_shift):
            kinetic_phase = np.exp(-1j * self.h.kinetic_spectrum(self.grid, k_shift) * self.dt / HBAR)
        else:
            kinetic_phase = self.kinetic_phase
        amps = psi.amplitudes
        if self.half_potential_phase is not None:
            amps = amps * self.half_potential_phase
        axes = tuple(range(-psi.n_particles, 0))
        phi = np.fft.fftn(psi.coordinate_view(amps), axes=axes)
        amps = np.fft.ifftn(phi * kinetic_phase, axes=axes).reshape(amps.shape)
        if self.half_potential_phase is not None:
            amps = amps * self.half_potential_phase
        return psi.with_amplitudes(amps)


def evolve_schrodinger(psi: GridWavefunction, h: HamiltonianSpec, dt: float) -> GridWavefunction:
    """One second-order split-step of the Schrodinger equation"""
    return SplitStepPropagator(psi.grid, h, dt).apply(psi)


def energy_expectation(psi: GridWavefunction, h: HamiltonianSpec, k_shift: Optional[np.ndarray] = None):
    """<H> with the kinetic part evaluated spectrally; row-wise over batch axes"""
    axes = tuple(range(-psi.n_particles, 0))
    phi = np.fft.fftn(psi.coordinate_view(), axes=axes)
    weight = np.abs(phi) ** 2
    sum_axes = axes if psi.levels == 1 else (-psi.n_particles - 1,) + axes
    spectrum = h.kinetic_spectrum(psi.grid, k_shift)
    kinetic = np.sum(spectrum * weight, axis=sum_axes) / np.sum(weight, axis=sum_axes)
    v = h.potential(psi.grid)
    if v is None:
        return kinetic
    density = np.abs(psi.amplitudes) ** 2
    return kinetic + np.sum(v * density, axis=psi.state_axes) / np.sum(density, axis=psi.state_axes)


class ComovingFrame:
    """Whole-cell position and momentum offsets of stored single-particle amplitudes.

    The stored state is the physical one translated by ``x_offset`` and boosted by
    ``k_offset``; both offsets are integers of grid cells (dx and 2*pi/L), so the shifts are
    exact on the periodic grid. Valid only for translation-invariant Hamiltonians.
    """

    def __init__(self, grid: SpatialGrid, h: HamiltonianSpec, batch_shape: Tuple[int, ...] = ()):
        if not h.translation_invariant and h.kind != HamiltonianKind.MEASUREMENT:
            raise ConfigurationError(f"comoving frame needs a translation-invariant Hamiltonian, got {h.kind.value}")
        if h.n_particles != 1:
            raise ConfigurationError("comoving frame supports single-particle states only")
        self.grid = grid
        self.x_cells = np.zeros(batch_shape, dtype=np.int64)
        self.k_cells = np.zeros(batch_shape, dtype=np.int64)

    @property
    def dk(self) -> float:
        return 2.0 * np.pi / self.grid.length

    @property
    def x_offset(self) -> np.ndarray:
        return self.x_cells * self.grid.dx

    @property
    def k_offset(self) -> np.ndarray:
        return self.k_cells * self.dk

    def select(self, index) -> "ComovingFrame":
        other = ComovingFrame.__new__(ComovingFrame)
        other.grid = self.grid
        other.x_cells = self.x_cells[index]
        other.k_cells = self.k_cells[index]
        return other

    def recenter(self, psi: GridWavefunction) -> GridWavefunction:
        """Shift rows whose <q> left the central half of the box or whose <k> left a quarter of k_max"""
        grid = self.grid
        n = grid.n_points
        amps = psi.amplitudes
        mean_q = np.asarray(expectation_position(psi)) - grid.center
        x_shift = np.where(np.abs(mean_q) > 0.25 * grid.length, np.rint(mean_q / grid.dx), 0).astype(np.int64)
        if np.any(x_shift):
            idx = (np.arange(n) + x_shift[..., None]) % n
            if psi.levels > 1:
                idx = idx[..., None, :]
            amps = np.take_along_axis(amps, np.broadcast_to(idx, amps.shape), axis=-1)
            self.x_cells = self.x_cells + x_shift
        mean_k = np.asarray(expectation_momentum(psi)) / HBAR
        k_max = np.pi / grid.dx
        k_shift = np.where(np.abs(mean_k) > 0.25 * k_max, np.rint(mean_k / self.dk), 0).astype(np.int64)
        if np.any(k_shift):
            phase = np.exp(-2j * np.pi * k_shift[..., None] * np.arange(n) / n)
            if psi.levels > 1:
                phase = phase[..., None, :]
            amps = amps * phase
            self.k_cells = self.k_cells + k_shift
        return psi.with_amplitudes(amps)
