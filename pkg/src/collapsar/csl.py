"""Second-quantized CSL on a small 1-D bosonic lattice"""

from dataclasses import dataclass
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import math

import networkx as nx
import numpy as np
from numpy.polynomial import polynomial as P
from scipy.linalg import eigh, expm

from .core import CollapseParams, NoiseStream, csl_gamma
from .errors import ConfigurationError, FitError, ShapeError, StepSizeError
from .lindblad import DensityOperator, LindbladGenerator
from .qmupl import MARGIN, STABILITY_BOUND
from .sampling import SeriesRecorder, TrajectorySampler

logger = logging.getLogger(__name__)

MAX_SITES = 6
MAX_OCCUPATION = 2
STATE_NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LatticeFockSpace:
    """Bosonic Fock space of M sites truncated at n_max quanta per site.

    Basis states are occupation tuples in lexicographic order: (0,...,0), (0,...,1), ...
    """
    n_sites: int
    n_max: int = 1
    spacing: float = 1.0
    periodic: bool = True

    def __post_init__(self):
        problems = []
        if not 1 <= self.n_sites <= MAX_SITES:
            problems.append(f"n_sites: must be in 1..{MAX_SITES} (got {self.n_sites})")
        if not 1 <= self.n_max <= MAX_OCCUPATION:
            problems.append(f"n_max: must be in 1..{MAX_OCCUPATION} (got {self.n_max})")
        if not self.spacing > 0:
            problems.append("spacing: must be positive")
        if problems:
            raise ConfigurationError("Invalid lattice", problems)

    @property
    def dimension(self) -> int:
        return (self.n_max + 1) ** self.n_sites

    @property
    def basis(self) -> List[Tuple[int, ...]]:
        return list(product(range(self.n_max + 1), repeat=self.n_sites))

    @property
    def occupations(self) -> np.ndarray:
        """(dimension, n_sites) occupation numbers"""
        return np.asarray(self.basis, dtype=float).reshape(self.dimension, self.n_sites)

    @property
    def positions(self) -> np.ndarray:
        return self.spacing * np.arange(self.n_sites)

    @property
    def totals(self) -> np.ndarray:
        return np.sum(self.occupations, axis=1)

    def index(self, occupation: Sequence[int]) -> int:
        occupation = tuple(int(n) for n in occupation)
        if len(occupation) != self.n_sites or any(not 0 <= n <= self.n_max for n in occupation):
            raise ShapeError(f"occupation {occupation} not in this space")
        index = 0
        for n in occupation:
            index = index * (self.n_max + 1) + n
        return index

    def sector(self, n_particles: int) -> np.ndarray:
        return np.flatnonzero(self.totals == n_particles)

    def graph(self) -> nx.Graph:
        return nx.cycle_graph(self.n_sites) if self.periodic and self.n_sites > 2 else nx.path_graph(self.n_sites)

    def to_dict(self) -> Dict[str, Any]:
        return {"n_sites": self.n_sites, "n_max": self.n_max, "spacing": self.spacing,
                "periodic": self.periodic, "dimension": self.dimension}


@dataclass
class LatticeFockState:
    space: LatticeFockSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape[-1] != self.space.dimension:
            raise ShapeError(f"amplitudes must have length {self.space.dimension}")
        deviation = np.max(np.abs(np.atleast_1d(self.norm_squared()) - 1.0))
        if deviation > STATE_NORM_TOLERANCE:
            raise ShapeError(f"Fock state not normalized (deviation {deviation:.3e})")

    def norm_squared(self):
        return np.sum(np.abs(self.amplitudes) ** 2, axis=-1)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def site_occupations(self) -> np.ndarray:
        """<n_y> per site, shape (*batch, n_sites)"""
        return self.probabilities() @ self.space.occupations

    def number_moments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and variance of the total particle number"""
        p = self.probabilities()
        totals = self.space.totals
        mean = p @ totals
        return mean, np.maximum(p @ (totals * totals) - mean * mean, 0.0)

    def expectation(self, operator: np.ndarray):
        v = self.amplitudes
        return np.real(np.einsum("...i,ij,...j->...", v.conj(), operator, v))


def fock_state(space: LatticeFockSpace, occupation: Sequence[int]) -> LatticeFockState:
    amps = np.zeros(space.dimension, dtype=np.complex128)
    amps[space.index(occupation)] = 1.0
    return LatticeFockState(space, amps)


def fock_superposition(space: LatticeFockSpace, occupations: Sequence[Sequence[int]],
                       amplitudes: Sequence[complex]) -> LatticeFockState:
    if len(occupations) != len(amplitudes):
        raise ConfigurationError("one amplitude per occupation required")
    amps = np.zeros(space.dimension, dtype=np.complex128)
    for occ, c in zip(occupations, amplitudes):
        amps[space.index(occ)] += c
    norm = np.linalg.norm(amps)
    if norm == 0:
        raise ConfigurationError("superposition has zero norm")
    return LatticeFockState(space, amps / norm)


def annihilation_operator(space: LatticeFockSpace, site: int) -> np.ndarray:
    """Truncated a_y as a dense matrix"""
    op = np.zeros((space.dimension, space.dimension))
    for j, occ in enumerate(space.basis):
        if occ[site] > 0:
            lowered = list(occ)
            lowered[site] -= 1
            op[space.index(lowered), j] = math.sqrt(occ[site])
    return op


def creation_operator(space: LatticeFockSpace, site: int) -> np.ndarray:
    return annihilation_operator(space, site).T.copy()


def total_number_operator(space: LatticeFockSpace) -> np.ndarray:
    return np.diag(space.totals)


def hopping_hamiltonian(space: LatticeFockSpace, hopping: float = 1.0) -> np.ndarray:
    """H = -J sum over lattice edges of (a+_i a_j + a+_j a_i)"""
    h = np.zeros((space.dimension, space.dimension))
    lowers = [annihilation_operator(space, y) for y in range(space.n_sites)]
    for i, j in space.graph().edges():
        term = lowers[i].T @ lowers[j]
        h -= hopping * (term + term.T)
    return h


@dataclass
class SmearedNumberOperator:
    """Gaussian-smeared number density N(x); diagonal in the occupation basis"""
    center: float
    alpha: float
    diagonal: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)


def smearing_kernel(distance: np.ndarray, alpha: float) -> np.ndarray:
    """1-D normalized Gaussian (alpha/2pi)^(1/2) exp(-(alpha/2) d^2)"""
    return math.sqrt(alpha / (2.0 * math.pi)) * np.exp(-0.5 * alpha * distance * distance)


def build_number_density(space: LatticeFockSpace, center: float, alpha: float) -> SmearedNumberOperator:
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    weights = smearing_kernel(center - space.positions, alpha)
    return SmearedNumberOperator(float(center), float(alpha), space.occupations @ weights)


def gamma_from(params: CollapseParams) -> float:
    """CSL strength gamma = lambda (4 pi / alpha)^(3/2)"""
    return csl_gamma(params.grw_lambda, params.alpha)


def site_densities(space: LatticeFockSpace, alpha: float) -> np.ndarray:
    """Diagonals of N(x) for noise centers on every site, shape (n_sites, dimension)"""
    return np.stack([build_number_density(space, x, alpha).diagonal for x in space.positions])


def check_csl_step(densities: np.ndarray, gamma: float, spacing: float, dt: float, margin: float = MARGIN) -> None:
    if not dt > 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    spread = float(np.max(np.ptp(densities, axis=1))) if densities.size else 0.0
    stiffness = gamma * spacing * spread ** 2
    if stiffness * dt >= STABILITY_BOUND:
        raise StepSizeError(f"dt={dt:g} violates the collapse stability bound (stiffness {stiffness:.3g})")
    if stiffness > 0 and dt > margin / stiffness * (1.0 + 1e-9):
        raise StepSizeError(f"dt={dt:g} exceeds collapse-term guard {margin / stiffness:.3g}")


def _collapse_factor(amps: np.ndarray, densities: np.ndarray, weight: float, dW: np.ndarray, dt: float) -> np.ndarray:
    probs = np.abs(amps) ** 2
    probs = probs / np.sum(probs, axis=-1, keepdims=True)
    means = probs @ densities.T
    u = densities[None, :, :] - means[..., None] if amps.ndim > 1 else densities - means[:, None]
    if amps.ndim > 1:
        drive = np.einsum("bs,bsd->bd", dW, u)
        damping = np.sum(u * u, axis=-2)
    else:
        drive = dW @ u
        damping = np.sum(u * u, axis=0)
    return 1.0 + math.sqrt(weight) * drive - 0.5 * weight * damping * dt


def csl_step(state: LatticeFockState, h: np.ndarray, gamma: float, dW_field: np.ndarray, dt: float,
             alpha: float, propagator: Optional[np.ndarray] = None) -> LatticeFockState:
    """Euler-Maruyama step of the CSL equation with one noise center per site, then renormalize.

    The site sum replaces the spatial integral, so each center carries weight gamma * spacing.
    ``propagator`` may hold a precomputed expm(-i h dt).
    """
    space = state.space
    densities = site_densities(space, alpha)
    weight = gamma * space.spacing
    check_csl_step(densities, gamma, space.spacing, dt)
    dW_field = np.asarray(dW_field, dtype=float)
    if dW_field.shape[-1] != space.n_sites:
        raise ShapeError(f"need one increment per site ({space.n_sites})")
    amps = state.amplitudes * _collapse_factor(state.amplitudes, densities, weight, dW_field, dt)
    u = propagator if propagator is not None else expm(-1j * h * dt)
    amps = amps @ u.T
    norm = np.sqrt(np.sum(np.abs(amps) ** 2, axis=-1, keepdims=True))
    return LatticeFockState(space, amps / norm)


def csl_generator(space: LatticeFockSpace, h: np.ndarray, gamma: float, alpha: float) -> LindbladGenerator:
    """Ensemble-average dynamics: double commutators with N(x) at every site"""
    densities = site_densities(space, alpha)
    return LindbladGenerator(h, list(densities), [gamma * space.spacing] * space.n_sites)


def fock_density(state: LatticeFockState) -> DensityOperator:
    """Average projector over the batch rows of a Fock state"""
    rows = state.amplitudes.reshape(-1, state.space.dimension)
    rho = rows.T @ rows.conj() / rows.shape[0]
    rho = 0.5 * (rho + rho.conj().T)
    return DensityOperator(rho / np.real(np.trace(rho)))


def lattice_energy_slope(space: LatticeFockSpace, h: np.ndarray, gamma: float, alpha: float,
                         rho: DensityOperator) -> float:
    """d<H>/dt at the given state from the master equation (the commutator part drops out)"""
    generator = csl_generator(space, h, gamma, alpha)
    return float(np.real(np.trace(h @ generator.rhs(rho.matrix))))


def sector_residual(state: LatticeFockState, n_particles: int) -> float:
    """Norm of the component outside the N-particle sector (largest over the batch)"""
    outside = np.ones(state.space.dimension, dtype=bool)
    outside[state.space.sector(n_particles)] = False
    return float(np.max(np.sqrt(np.sum(np.abs(state.amplitudes[..., outside]) ** 2, axis=-1))))


def ground_state(space: LatticeFockSpace, h: np.ndarray, n_particles: int) -> LatticeFockState:
    """Lowest eigenvector of H within the N-particle sector"""
    sector = space.sector(n_particles)
    if sector.size == 0:
        raise ConfigurationError(f"no basis states with {n_particles} particles")
    _, vectors = eigh(h[np.ix_(sector, sector)])
    amps = np.zeros(space.dimension, dtype=np.complex128)
    amps[sector] = vectors[:, 0]
    return LatticeFockState(space, amps / np.linalg.norm(amps))


@dataclass
class CslConfig:
    """Lattice CSL problem; ``initial`` = None starts from the N-particle ground state of the hopping H"""
    space: LatticeFockSpace
    gamma: float
    alpha: float
    dt: float
    horizon: float
    hopping: float = 1.0
    n_particles: int = 1
    initial: Optional[List[Tuple[Tuple[int, ...], complex]]] = None
    output_every: int = 1
    margin: float = MARGIN

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def hamiltonian(self) -> np.ndarray:
        return hopping_hamiltonian(self.space, self.hopping)

    def initial_state(self) -> LatticeFockState:
        if self.initial is None:
            return ground_state(self.space, self.hamiltonian, self.n_particles)
        occupations = [occ for occ, _ in self.initial]
        return fock_superposition(self.space, occupations, [c for _, c in self.initial])

    def validate(self) -> None:
        problems = []
        if self.gamma < 0:
            problems.append("gamma: must be >= 0")
        if not self.alpha > 0:
            problems.append("alpha: must be positive")
        if self.dt <= 0 or self.horizon <= 0:
            problems.append("dt and horizon: must be positive")
        elif abs(self.n_steps * self.dt - self.horizon) > 1e-9 * self.horizon:
            problems.append("horizon/dt must be an integer")
        if self.output_every < 1:
            problems.append("output_every: must be >= 1")
        if problems:
            raise ConfigurationError("Invalid CSL configuration", problems)
        check_csl_step(site_densities(self.space, self.alpha), self.gamma, self.space.spacing, self.dt, self.margin)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "space": self.space.to_dict(),
            "gamma": self.gamma,
            "alpha": self.alpha,
            "dt": self.dt,
            "horizon": self.horizon,
            "hopping": self.hopping,
            "n_particles": self.n_particles,
            "initial": None if self.initial is None else [
                {"occupation": list(occ), "amplitude": [complex(c).real, complex(c).imag]}
                for occ, c in self.initial],
            "output_every": self.output_every,
        }


def _csl_observables(space: LatticeFockSpace) -> Tuple[str, ...]:
    return ("energy", "number_mean", "number_variance", "norm_drift") + tuple(
        f"n_{y}" for y in range(space.n_sites))


def integrate_csl(config: CslConfig, increments: np.ndarray) -> Tuple[Dict[str, np.ndarray], LatticeFockState]:
    """Integrate a block from increments of shape (batch, n_steps, n_sites)"""
    space = config.space
    batch = increments.shape[0]
    h = config.hamiltonian
    densities = site_densities(space, config.alpha)
    weight = config.gamma * space.spacing
    propagator_t = expm(-1j * h * config.dt).T
    amps = np.broadcast_to(config.initial_state().amplitudes, (batch, space.dimension)).copy()
    names = _csl_observables(space)
    steps = list(range(0, config.n_steps + 1, config.output_every))
    if steps[-1] != config.n_steps:
        steps.append(config.n_steps)
    out_set = set(steps)
    recorder = SeriesRecorder(names, batch, len(steps))
    drift = np.zeros(batch)

    def snapshot():
        state = LatticeFockState(space, amps)
        mean, var = state.number_moments()
        values = {"energy": state.expectation(h), "number_mean": mean, "number_variance": var,
                  "norm_drift": drift}
        occ = state.site_occupations()
        for y in range(space.n_sites):
            values[f"n_{y}"] = occ[:, y]
        recorder.record(values)

    snapshot()
    for step in range(1, config.n_steps + 1):
        if weight > 0:
            amps = amps * _collapse_factor(amps, densities, weight, increments[:, step - 1, :], config.dt)
        amps = amps @ propagator_t
        norm2 = np.sum(np.abs(amps) ** 2, axis=-1)
        drift = np.abs(norm2 - 1.0)
        amps = amps / np.sqrt(norm2)[:, None]
        if step in out_set:
            snapshot()
    return recorder.result(), LatticeFockState(space, amps)


class CslSampler(TrajectorySampler):
    """Ensemble adapter for lattice CSL; records hold the final site occupations"""
    model = "csl"

    def __init__(self, config: CslConfig):
        config.validate()
        self.config = config

    @property
    def times(self) -> np.ndarray:
        c = self.config
        steps = list(range(0, c.n_steps + 1, c.output_every))
        if steps[-1] != c.n_steps:
            steps.append(c.n_steps)
        return np.asarray(steps, dtype=float) * c.dt

    @property
    def observables(self) -> Tuple[str, ...]:
        return _csl_observables(self.config.space)

    def simulate(self, indices, master_seed):
        c = self.config
        increments = np.stack([NoiseStream(master_seed, i).wiener(c.dt, (c.n_steps, c.space.n_sites))
                               for i in indices])
        series, final = integrate_csl(c, increments)
        occupations = final.site_occupations()
        records = [{"index": int(i), "final_occupations": occupations[row].tolist()}
                   for row, i in enumerate(indices)]
        return series, records, 0

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model, **self.config.to_dict()}


def energy_growth_vs_alpha(config: CslConfig, alphas: Sequence[float], n_trajectories: int,
                           master_seed: int = 0, gamma_scaling: Optional[Dict[float, float]] = None,
                           fit_window: Optional[float] = None, degree: int = 1) -> List[Dict[str, Any]]:
    """Initial ensemble d<H>/dt for each alpha, all runs sharing the same noise.

    The lattice energy is bounded, so the mean energy bends over as heating saturates. The slope
    is the linear coefficient of a polynomial fit of ``degree`` (1 or 2) over t <= ``fit_window``
    (default: the whole horizon); a quadratic absorbs the leading curvature. Linear fits whose
    slope changes by more than 10% across the window are logged as curved.
    ``gamma_scaling`` optionally maps alpha to the gamma used for that run.
    """
    if degree not in (1, 2):
        raise ConfigurationError(f"fit degree must be 1 or 2, got {degree}")
    table = []
    for alpha in alphas:
        gamma = gamma_scaling.get(alpha, config.gamma) if gamma_scaling else config.gamma
        run = CslConfig(space=config.space, gamma=gamma, alpha=alpha, dt=config.dt, horizon=config.horizon,
                        hopping=config.hopping, n_particles=config.n_particles, initial=config.initial,
                        output_every=config.output_every, margin=config.margin)
        sampler = CslSampler(run)
        series, _, _ = sampler.simulate(list(range(n_trajectories)), master_seed)
        t = sampler.times
        energy = series["energy"]
        if fit_window is not None:
            keep = t <= fit_window * (1.0 + 1e-9)
            t, energy = t[keep], energy[:, keep]
        mean = np.mean(energy, axis=0)
        if len(t) < 4 or not np.all(np.isfinite(mean)):
            raise FitError(f"energy series for alpha={alpha} cannot be fitted")
        coef = P.polyfit(t, mean, degree)
        slope, intercept = float(coef[1]), float(coef[0])
        per_trajectory = P.polyfit(t, energy.T, degree)[1]
        slope_se = float(np.std(per_trajectory, ddof=1) / math.sqrt(n_trajectories)) if n_trajectories > 1 else 0.0
        if slope < 0 and -slope > 3.0 * slope_se:
            raise FitError(f"mean energy decreases for alpha={alpha} (slope {slope:.3g})")
        # relative change of the slope across the window
        bend = abs(2.0 * P.polyfit(t, mean, 2)[2] * (t[-1] - t[0]) / slope) if slope else 0.0
        if degree == 1 and bend > 0.1:
            logger.warning(f"Mean energy for alpha={alpha:g} is curved (slope changes by {bend:.0%}); "
                           f"shorten the fit window or fit a quadratic")
        table.append({"alpha": alpha, "gamma": gamma, "slope": slope, "slope_se": slope_se,
                      "intercept": intercept, "curvature": float(bend)})
        logger.info(f"CSL energy slope alpha={alpha:g}: {slope:.4g} +- {slope_se:.2g}")
    return table
