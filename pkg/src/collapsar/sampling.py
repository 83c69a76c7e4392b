"""Trajectory sampler interface shared by the GRW, QMUPL, Gaussian, measurement and CSL models"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from .core import (
    HBAR,
    GridWavefunction,
    boundary_fraction,
    expectation_momentum,
    expectation_position,
    spread_momentum,
    spread_position,
)
from .errors import CollapsarError, ShapeError
from .hamiltonian import energy_expectation

logger = logging.getLogger(__name__)

GRID_OBSERVABLES = ("mean_q", "mean_p", "sigma_q", "sigma_p", "energy", "norm_drift")


@dataclass
class TrajectoryLog:
    """Observable time series of one trajectory"""
    times: np.ndarray
    series: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, values in self.series.items():
            if len(values) != len(self.times):
                raise ShapeError(f"series '{name}' has {len(values)} points, expected {len(self.times)}")

    @property
    def columns(self) -> List[str]:
        return ["t"] + list(self.series)

    def rows(self) -> List[List[float]]:
        return [[float(t)] + [float(self.series[c][i]) for c in self.series]
                for i, t in enumerate(self.times)]

    def final(self, name: str) -> float:
        return float(self.series[name][-1])


@dataclass
class TrajectoryFailure:
    """A trajectory that raised; excluded from moments but always reported"""
    index: int
    error_type: str
    message: str

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "error_type": self.error_type, "message": self.message}


@dataclass
class ChunkResult:
    """Output of one fixed-size block of trajectories, rows ordered by trajectory index"""
    indices: List[int]
    series: Dict[str, np.ndarray]
    ok_indices: List[int] = field(default_factory=list)
    failures: List[TrajectoryFailure] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)
    boundary_flags: int = 0

    @property
    def n_ok(self) -> int:
        return len(self.ok_indices)


def observe(psi: GridWavefunction, h, x_offset=0.0, k_offset=None, norm_drift=0.0) -> Dict[str, np.ndarray]:
    """Standard grid observables of particle 0, row-wise over the batch"""
    mean_p = expectation_momentum(psi)
    if k_offset is not None:
        mean_p = mean_p + HBAR * k_offset
    return {
        "mean_q": np.asarray(expectation_position(psi) + x_offset, dtype=float),
        "mean_p": np.asarray(mean_p, dtype=float),
        "sigma_q": np.asarray(spread_position(psi), dtype=float),
        "sigma_p": np.asarray(spread_momentum(psi), dtype=float),
        "energy": np.asarray(energy_expectation(psi, h, k_offset), dtype=float),
        "norm_drift": np.broadcast_to(np.asarray(norm_drift, dtype=float), psi.batch_shape).copy(),
    }


class SeriesRecorder:
    """Collects observables of a batch at output steps into (batch, n_times) arrays"""

    def __init__(self, names: Sequence[str], batch: int, n_times: int):
        self.names = tuple(names)
        self.data = {name: np.zeros((batch, n_times)) for name in self.names}
        self.cursor = 0

    def record(self, values: Dict[str, np.ndarray]) -> None:
        for name in self.names:
            self.data[name][:, self.cursor] = values[name]
        self.cursor += 1

    def result(self) -> Dict[str, np.ndarray]:
        return self.data


def output_steps(n_steps: int, every: int) -> List[int]:
    steps = list(range(0, n_steps + 1, every))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return steps


def max_boundary_fraction(psi: GridWavefunction) -> np.ndarray:
    return np.atleast_1d(np.asarray(boundary_fraction(psi)))


class TrajectorySampler(ABC):
    """A model that integrates blocks of independent trajectories.

    Trajectory ``i`` draws all randomness from ``NoiseStream(master_seed, i, ...)``, so a
    trajectory's output never depends on which block it was computed in.
    """
    model: str = "abstract"

    @property
    @abstractmethod
    def times(self) -> np.ndarray:
        """Output times shared by every trajectory"""

    @property
    def observables(self) -> Tuple[str, ...]:
        return GRID_OBSERVABLES

    @abstractmethod
    def simulate(self, indices: List[int], master_seed: int) -> Tuple[Dict[str, np.ndarray], List[Dict[str, Any]], int]:
        """Integrate a block; returns (series with one row per index, per-trajectory records, boundary flag count)"""

    def describe(self) -> Dict[str, Any]:
        return {"model": self.model}

    def run_chunk(self, indices: List[int], master_seed: int) -> ChunkResult:
        """Run a block, falling back to one-by-one integration to isolate failing trajectories"""
        indices = list(indices)
        try:
            series, records, flags = self.simulate(indices, master_seed)
            return ChunkResult(indices, series, ok_indices=indices, records=records, boundary_flags=flags)
        except (CollapsarError, FloatingPointError) as e:
            if len(indices) == 1:
                failure = TrajectoryFailure(indices[0], type(e).__name__, str(e))
                return ChunkResult(indices, {name: np.zeros((0, len(self.times))) for name in self.observables},
                                   failures=[failure])
            logger.debug(f"Block starting at trajectory {indices[0]} failed ({e}); isolating")

        rows: Dict[str, List[np.ndarray]] = {name: [] for name in self.observables}
        result = ChunkResult(indices, {})
        for i in indices:
            single = self.run_chunk([i], master_seed)
            if single.failures:
                result.failures.extend(single.failures)
                continue
            result.ok_indices.append(i)
            result.records.extend(single.records)
            result.boundary_flags += single.boundary_flags
            for name in self.observables:
                rows[name].append(single.series[name][0])
        result.series = {name: (np.vstack(rows[name]) if rows[name] else np.zeros((0, len(self.times))))
                         for name in self.observables}
        return result

    def run_trajectory(self, index: int, master_seed: int) -> TrajectoryLog:
        chunk = self.run_chunk([index], master_seed)
        if chunk.failures:
            f = chunk.failures[0]
            raise CollapsarError(f"trajectory {index} failed: {f.error_type}: {f.message}")
        return TrajectoryLog(self.times, {name: chunk.series[name][0] for name in self.observables})
