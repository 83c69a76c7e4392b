"""Von Neumann measurement: a two-level micro system coupled to a collapsing macroscopic pointer"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy import stats

from .classifier import INDETERMINATE, BasinTracker, Outcome, binomial_summary, outcome_counts, outcome_label
from .core import (
    BOUNDARY_TOLERANCE,
    GridWavefunction,
    NoiseStream,
    SpatialGrid,
    expectation_position,
    gaussian_state,
)
from .errors import ConfigurationError
from .hamiltonian import ComovingFrame, HamiltonianSpec, SplitStepPropagator
from .qmupl import advance_state, check_step_size, stationary_gaussian
from .sampling import GRID_OBSERVABLES, SeriesRecorder, TrajectorySampler, max_boundary_fraction, observe, output_steps

logger = logging.getLogger(__name__)

MEASUREMENT_OBSERVABLES = GRID_OBSERVABLES + ("weight_plus",)


@dataclass
class MeasurementModel:
    """Micro amplitudes (a, b) on |+>, |->, a pointer of mass M collapsing at rate lambda_cm.

    During the coupling window H = P^2/2M + kappa * s * P moves the pointer branch of
    eigenvalue s by kappa * s * window; afterwards the pointer is free.
    """
    grid: SpatialGrid
    a: complex = 1.0
    b: complex = 0.0
    pointer_mass: float = 600.0
    lambda_cm: float = 5000.0
    coupling: float = 1.0
    window: float = 1.0
    horizon: float = 1.0
    dt: float = 2e-4
    pointer_width: Optional[float] = None
    guard_length: Optional[float] = 0.1
    comoving: bool = True
    hold_steps: int = 100
    collapse_threshold: float = 1e-3
    output_every: int = 10
    micro_eigenvalues: Tuple[float, float] = (1.0, -1.0)

    @property
    def weights(self) -> Tuple[float, float]:
        return abs(self.a) ** 2, abs(self.b) ** 2

    @property
    def outcome_centers(self) -> Tuple[float, float]:
        return tuple(self.coupling * s * self.window for s in self.micro_eigenvalues)

    @property
    def separation(self) -> float:
        c = self.outcome_centers
        return abs(c[0] - c[1])

    @property
    def localization_threshold(self) -> float:
        return self.separation / 20.0

    @property
    def basin_tolerance(self) -> float:
        return self.separation / 4.0

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def window_steps(self) -> int:
        return int(round(self.window / self.dt))

    @property
    def hamiltonian(self) -> HamiltonianSpec:
        return HamiltonianSpec.measurement(self.coupling, self.pointer_mass, self.micro_eigenvalues)

    def validate(self) -> None:
        problems = []
        if abs(self.weights[0] + self.weights[1] - 1.0) > 1e-9:
            problems.append(f"a, b: |a|^2 + |b|^2 must be 1 (got {sum(self.weights):.12g})")
        if self.pointer_mass <= 0:
            problems.append("pointer_mass: must be positive")
        if self.lambda_cm < 0:
            problems.append("lambda_cm: must be >= 0")
        if self.coupling < 0 or self.window < 0:
            problems.append("coupling and window: must be >= 0")
        if self.dt <= 0 or self.horizon <= 0:
            problems.append("dt and horizon: must be positive")
        elif abs(self.n_steps * self.dt - self.horizon) > 1e-9 * self.horizon:
            problems.append("horizon/dt must be an integer")
        if self.window > self.horizon:
            problems.append("window: must not exceed the horizon")
        if self.pointer_width is None and self.lambda_cm == 0:
            problems.append("pointer_width: required when lambda_cm is 0")
        if self.hold_steps < 1 or self.output_every < 1:
            problems.append("hold_steps and output_every: must be >= 1")
        if self.separation > 0 and not self.comoving:
            edge = max(abs(c) for c in self.outcome_centers)
            if edge >= self.grid.half_width:
                problems.append("grid: outcome positions lie outside the box (enable comoving)")
        if problems:
            raise ConfigurationError("Invalid measurement model", problems)
        check_step_size(self.grid, [self.lambda_cm], self.dt, self.guard_length)

    def ready_state(self) -> GridWavefunction:
        """Pointer ready state at the origin"""
        if self.pointer_width is not None:
            return gaussian_state(self.grid, 0.0, self.pointer_width)
        return stationary_gaussian(self.grid, 0.0, self.pointer_mass, self.lambda_cm)

    def initial_state(self) -> GridWavefunction:
        phi = self.ready_state().amplitudes
        amps = np.stack([complex(self.a) * phi, complex(self.b) * phi])
        return GridWavefunction(self.grid, amps, levels=2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "a": [complex(self.a).real, complex(self.a).imag],
            "b": [complex(self.b).real, complex(self.b).imag],
            "pointer_mass": self.pointer_mass,
            "lambda_cm": self.lambda_cm,
            "coupling": self.coupling,
            "window": self.window,
            "horizon": self.horizon,
            "dt": self.dt,
            "pointer_width": self.pointer_width,
            "guard_length": self.guard_length,
            "comoving": self.comoving,
            "hold_steps": self.hold_steps,
            "collapse_threshold": self.collapse_threshold,
            "output_every": self.output_every,
        }


def pointer_default(a: complex = 1 / math.sqrt(2), b: complex = 1 / math.sqrt(2), **overrides) -> MeasurementModel:
    """Preset ordering collapse time << coupling window << pointer spreading time.

    Outcome positions +-1, stationary pointer width ~0.017, 256-point box of half-width 1.25
    followed by a comoving frame.
    """
    grid = overrides.pop("grid", SpatialGrid(-1.25, 1.25, 256))
    return MeasurementModel(grid=grid, a=a, b=b, **overrides)


@dataclass
class OutcomeRecord:
    """Result of one measurement trajectory"""
    outcome: Outcome
    times: np.ndarray
    mean_q: np.ndarray
    sigma_q: np.ndarray
    fidelity: float
    collapse_time: Optional[float]
    index: int = 0
    weight_plus: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_boundary_fraction: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "outcome": self.outcome.value,
            "fidelity": self.fidelity,
            "collapse_time": self.collapse_time,
            "max_sigma_q": float(np.max(self.sigma_q)),
            "final_mean_q": float(self.mean_q[-1]),
            "max_boundary_fraction": self.max_boundary_fraction,
        }


def _branch_weights(psi: GridWavefunction) -> np.ndarray:
    """Probability of each micro level, shape (*batch, levels)"""
    return np.sum(np.abs(psi.amplitudes) ** 2, axis=-1) * psi.grid.dx


def integrate_measurement(model: MeasurementModel, increments: np.ndarray,
                          indices: Sequence[int]) -> Tuple[Dict[str, np.ndarray], List[OutcomeRecord], int]:
    """Integrate a block of measurement trajectories from increments of shape (batch, n_steps, 1)"""
    batch = increments.shape[0]
    grid, dt = model.grid, model.dt
    psi0 = model.initial_state()
    psi = psi0.with_amplitudes(np.broadcast_to(psi0.amplitudes, (batch,) + psi0.amplitudes.shape).copy())
    coupled = model.hamiltonian
    free = coupled.without_coupling()
    propagators = {True: SplitStepPropagator(grid, coupled, dt), False: SplitStepPropagator(grid, free, dt)}
    frame = ComovingFrame(grid, coupled, (batch,)) if model.comoving else None
    coordinates = [psi.coordinate(0)]
    lambdas = [model.lambda_cm]

    steps = output_steps(model.n_steps, model.output_every)
    out_set = set(steps)
    recorder = SeriesRecorder(MEASUREMENT_OBSERVABLES, batch, len(steps))
    tracker = BasinTracker(model.outcome_centers, model.basin_tolerance, model.hold_steps, (batch,))
    collapse_step = np.full(batch, -1, dtype=np.int64)
    boundary = np.zeros(batch)
    drift = np.zeros(batch)

    def snapshot(h):
        x_off = frame.x_offset if frame else 0.0
        k_off = frame.k_offset if frame else None
        values = observe(psi, h, x_off, k_off, drift)
        values["weight_plus"] = _branch_weights(psi)[..., 0]
        recorder.record(values)
        return np.maximum(boundary, max_boundary_fraction(psi))

    boundary = snapshot(coupled)
    for step in range(1, model.n_steps + 1):
        in_window = step <= model.window_steps
        h = coupled if in_window else free
        k_shift = frame.k_offset if frame else None
        psi, drift = advance_state(psi, propagators[in_window], lambdas, coordinates, increments[:, step - 1, :],
                              dt, k_shift)
        if frame:
            psi = frame.recenter(psi)
        x_off = frame.x_offset if frame else 0.0
        tracker.update(expectation_position(psi) + x_off)
        minority = np.min(_branch_weights(psi), axis=-1)
        collapse_step = np.where((collapse_step < 0) & (minority < model.collapse_threshold), step, collapse_step)
        if step in out_set:
            boundary = snapshot(h)

    series = recorder.result()
    times = np.asarray(steps, dtype=float) * dt
    final_weights = _branch_weights(psi)
    outcomes = tracker.outcomes()
    records = []
    for row, i in enumerate(indices):
        basin = int(outcomes[row])
        fidelity = float(final_weights[row, basin]) if basin != INDETERMINATE else float(np.max(final_weights[row]))
        records.append(OutcomeRecord(
            outcome=outcome_label(basin),
            times=times,
            mean_q=series["mean_q"][row].copy(),
            sigma_q=series["sigma_q"][row].copy(),
            fidelity=min(max(fidelity, 0.0), 1.0),
            collapse_time=float(collapse_step[row] * dt) if collapse_step[row] >= 0 else None,
            index=int(i),
            weight_plus=series["weight_plus"][row].copy(),
            max_boundary_fraction=float(boundary[row]),
        ))
    flags = int(np.sum(boundary > BOUNDARY_TOLERANCE))
    return series, records, flags


def run_measurement(model: MeasurementModel, noise: NoiseStream) -> OutcomeRecord:
    """One measurement trajectory; deterministic given the noise stream"""
    model.validate()
    increments = noise.wiener(model.dt, (model.n_steps, 1))[None]
    _, records, _ = integrate_measurement(model, increments, [noise.trajectory_index])
    return records[0]


def pointer_localization_report(record: OutcomeRecord, threshold: float) -> Dict[str, Any]:
    """Pointer path summary; ``localized`` is False when sigma_Q ever exceeded the threshold"""
    excursions = int(np.sum(record.sigma_q >= threshold))
    return {
        "max_sigma_q": float(np.max(record.sigma_q)),
        "final_sigma_q": float(record.sigma_q[-1]),
        "start_q": float(record.mean_q[0]),
        "final_q": float(record.mean_q[-1]),
        "travel": float(record.mean_q[-1] - record.mean_q[0]),
        "threshold": threshold,
        "excursions": excursions,
        "localized": excursions == 0,
    }


class MeasurementSampler(TrajectorySampler):
    """Ensemble adapter; records are OutcomeRecord dictionaries"""
    model = "measurement"

    def __init__(self, measurement: MeasurementModel):
        measurement.validate()
        self.measurement = measurement

    @property
    def times(self) -> np.ndarray:
        m = self.measurement
        return np.asarray(output_steps(m.n_steps, m.output_every), dtype=float) * m.dt

    @property
    def observables(self) -> Tuple[str, ...]:
        return MEASUREMENT_OBSERVABLES

    def simulate(self, indices, master_seed):
        m = self.measurement
        increments = np.stack([NoiseStream(master_seed, i).wiener(m.dt, (m.n_steps, 1)) for i in indices])
        series, records, flags = integrate_measurement(m, increments, indices)
        return series, [r.to_dict() for r in records], flags

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model, **self.measurement.to_dict()}


def born_report(records: Sequence[Dict[str, Any]], weights: Tuple[float, float],
                threshold: Optional[float] = None) -> Dict[str, Any]:
    """Outcome counts, frequencies and binomial errors against (|a|^2, |b|^2), with a chi-square test.

    The chi-square statistic uses classified trajectories only and is omitted when an
    expected count is zero.
    """
    total = len(records)
    counts = outcome_counts([Outcome(r["outcome"]) for r in records])
    classified = counts[Outcome.PLUS.value] + counts[Outcome.MINUS.value]
    report: Dict[str, Any] = {
        "total": total,
        "counts": counts,
        "plus": binomial_summary(counts[Outcome.PLUS.value], total, weights[0]),
        "minus": binomial_summary(counts[Outcome.MINUS.value], total, weights[1]),
        "indeterminate_fraction": counts[Outcome.INDETERMINATE.value] / total if total else float("nan"),
    }
    expected = [classified * weights[0], classified * weights[1]]
    if classified and min(expected) > 0:
        chi2, p_value = stats.chisquare([counts[Outcome.PLUS.value], counts[Outcome.MINUS.value]], expected)
        report["chi2"] = float(chi2)
        report["p_value"] = float(p_value)
    else:
        report["chi2"] = None
        report["p_value"] = None
    fidelities = np.asarray([r["fidelity"] for r in records if r["outcome"] != Outcome.INDETERMINATE.value])
    report["high_fidelity_fraction"] = float(np.mean(fidelities > 0.99)) if fidelities.size else float("nan")
    if threshold is not None:
        report["localized_fraction"] = (float(np.mean([r["max_sigma_q"] < threshold for r in records]))
                                        if total else float("nan"))
    return report
