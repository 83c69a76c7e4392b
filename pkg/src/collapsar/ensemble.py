"""Trajectory-ensemble runner, reproducible statistics and ensemble-level checks"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence
import logging
import math
import time

import numpy as np
from joblib import Parallel, delayed

from .analytics import energy_growth_rate
from .errors import ConfigurationError, EnsembleError, FitError, HorizonError, ResolutionError
from .hamiltonian import HamiltonianKind, HamiltonianSpec
from .sampling import ChunkResult, TrajectoryFailure, TrajectorySampler

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 64
MAX_FAILURE_FRACTION = 0.01


@dataclass
class ObservableStats:
    """Count, mean and summed squared deviations per output time"""
    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "ObservableStats":
        rows = np.asarray(rows, dtype=float)
        if rows.shape[0] == 0:
            return cls(0, np.zeros(rows.shape[1]), np.zeros(rows.shape[1]))
        mean = np.mean(rows, axis=0)
        return cls(rows.shape[0], mean, np.sum((rows - mean) ** 2, axis=0))

    def merge(self, other: "ObservableStats") -> "ObservableStats":
        """Pairwise (Chan et al.) combination; order matters only in the last bits"""
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return ObservableStats(n, mean, m2)

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.maximum(self.m2 / (self.n - 1), 0.0)

    @property
    def standard_error(self) -> np.ndarray:
        if self.n < 1:
            return np.full_like(self.mean, np.nan)
        return np.sqrt(self.variance / self.n)


@dataclass
class EnsembleStats:
    """Per-observable ensemble moments over the sampler's output times"""
    model: str
    master_seed: int
    n_requested: int
    times: np.ndarray
    observables: Dict[str, ObservableStats]
    failures: List[TrajectoryFailure] = field(default_factory=list)
    records: List[Dict[str, Any]] = field(default_factory=list)
    boundary_flags: int = 0
    series: Optional[Dict[str, np.ndarray]] = None

    @property
    def n_trajectories(self) -> int:
        return next(iter(self.observables.values())).n if self.observables else 0

    def mean(self, name: str) -> np.ndarray:
        return self.observables[name].mean

    def variance(self, name: str) -> np.ndarray:
        return self.observables[name].variance

    def standard_error(self, name: str) -> np.ndarray:
        return self.observables[name].standard_error

    def columns(self) -> List[str]:
        cols = ["t"]
        for name in self.observables:
            cols += [f"{name}_mean", f"{name}_var", f"{name}_se"]
        return cols

    def rows(self) -> List[List[float]]:
        out = []
        for i, t in enumerate(self.times):
            row = [float(t)]
            for s in self.observables.values():
                row += [float(s.mean[i]), float(s.variance[i]), float(s.standard_error[i])]
            out.append(row)
        return out

    def get_statistics(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "master_seed": self.master_seed,
            "n_requested": self.n_requested,
            "n_trajectories": self.n_trajectories,
            "n_failed": len(self.failures),
            "boundary_flags": self.boundary_flags,
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self.get_statistics(),
            "times": [float(t) for t in self.times],
            "observables": {
                name: {"mean": s.mean.tolist(), "variance": s.variance.tolist(),
                       "standard_error": s.standard_error.tolist()}
                for name, s in self.observables.items()
            },
            "failures": [f.to_dict() for f in self.failures],
        }


def _chunks(n: int, chunk_size: int) -> List[List[int]]:
    return [list(range(start, min(start + chunk_size, n))) for start in range(0, n, chunk_size)]


def _run_chunk(sampler: TrajectorySampler, indices: List[int], master_seed: int) -> ChunkResult:
    return sampler.run_chunk(indices, master_seed)


def run_ensemble(sampler: TrajectorySampler, n: int, master_seed: int, workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK_SIZE, keep_series: bool = False,
                 progress_callback: Optional[Callable[[int, int], None]] = None) -> EnsembleStats:
    """Run n trajectories; trajectory i always uses NoiseStream(master_seed, i).

    Chunks of ``chunk_size`` consecutive indices are the unit of work; their statistics are
    merged in chunk order, so the result does not depend on ``workers``.
    """
    if n < 1:
        raise ConfigurationError(f"ensemble size must be >= 1, got {n}")
    if workers < 1 or chunk_size < 1:
        raise ConfigurationError("workers and chunk_size must be >= 1")
    chunks = _chunks(n, chunk_size)
    start_time = time.time()
    logger.info(f"Running {sampler.model} ensemble: n={n}, seed={master_seed}, "
                f"{len(chunks)} chunks on {workers} worker(s)")

    if workers == 1:
        results = (_run_chunk(sampler, c, master_seed) for c in chunks)
    else:
        results = Parallel(n_jobs=workers, backend="loky", return_as="generator")(
            delayed(_run_chunk)(sampler, c, master_seed) for c in chunks)

    names = sampler.observables
    width = len(sampler.times)
    totals = {name: ObservableStats(0, np.zeros(width), np.zeros(width)) for name in names}
    failures: List[TrajectoryFailure] = []
    records: List[Dict[str, Any]] = []
    flags = 0
    kept: Dict[str, List[np.ndarray]] = {name: [] for name in names}
    for done, chunk in enumerate(results, start=1):
        for name in names:
            rows = chunk.series[name]
            totals[name] = totals[name].merge(ObservableStats.from_rows(rows))
            if keep_series and len(rows):
                kept[name].append(rows)
        failures.extend(chunk.failures)
        records.extend(chunk.records)
        flags += chunk.boundary_flags
        logger.debug(f"Chunk {done}/{len(chunks)}: {chunk.n_ok} ok, {len(chunk.failures)} failed")
        if progress_callback:
            progress_callback(done, len(chunks))

    for f in failures:
        logger.warning(f"Trajectory {f.index} failed: {f.error_type}: {f.message}")
    if flags:
        logger.warning(f"{flags} trajectories put probability > 1e-8 into the boundary cells")
    if len(failures) > MAX_FAILURE_FRACTION * n:
        raise EnsembleError(f"{len(failures)} of {n} trajectories failed "
                            f"(limit {MAX_FAILURE_FRACTION:.0%})")

    series = None
    if keep_series:
        series = {name: (np.vstack(kept[name]) if kept[name] else np.zeros((0, width))) for name in names}
    stats = EnsembleStats(sampler.model, master_seed, n, np.asarray(sampler.times, dtype=float), totals,
                          failures, records, flags, series)
    logger.info(f"Ensemble finished in {time.time() - start_time:.1f}s: "
                f"{stats.n_trajectories} ok, {len(failures)} failed")
    return stats


def _force(h: HamiltonianSpec, q: np.ndarray) -> np.ndarray:
    """-V'(q) of particle 0; exact for the linear forces supported here"""
    m = h.masses[0]
    if h.kind == HamiltonianKind.HARMONIC:
        return -m * h.omega ** 2 * q
    if h.kind == HamiltonianKind.LINEAR:
        return np.full_like(q, -m * h.g)
    if h.kind in (HamiltonianKind.NONE, HamiltonianKind.FREE):
        return np.zeros_like(q)
    raise ConfigurationError(f"no Ehrenfest check for {h.kind.value}")


def ehrenfest_check(stats: EnsembleStats, h: HamiltonianSpec, q0: float, p0: float,
                    sigma: float = 3.0, atol: float = 1e-9) -> Dict[str, Any]:
    """Ensemble means against Hamilton's equations.

    Two comparisons: E[<Q>], E[<P>] against the closed-form classical path, and central
    finite differences of E[<Q>], E[<P>] against E[<P>]/m and E[-V'(<Q>)], each taken
    relative to the same finite differences of the classical path so that only the
    statistical error remains.
    """
    t = stats.times
    if len(t) < 5:
        raise ResolutionError(f"need at least 5 output times, got {len(t)}")
    step = float(np.max(np.diff(t)))
    if h.kind == HamiltonianKind.HARMONIC and h.omega * step > 0.2:
        raise ResolutionError(f"output spacing {step:g} too coarse for omega={h.omega:g}")
    m = h.masses[0]
    mq, mp = stats.mean("mean_q"), stats.mean("mean_p")
    sq, sp = stats.standard_error("mean_q"), stats.standard_error("mean_p")
    q_cl, p_cl = h.classical_path(q0, p0, t)

    dev_q = np.abs(mq - q_cl)
    dev_p = np.abs(mp - p_cl)
    closed_ok = bool(np.all(dev_q <= sigma * sq + atol) and np.all(dev_p <= sigma * sp + atol))

    span = t[2:] - t[:-2]
    fd_q = (mq[2:] - mq[:-2]) / span - (q_cl[2:] - q_cl[:-2]) / span
    fd_p = (mp[2:] - mp[:-2]) / span - (p_cl[2:] - p_cl[:-2]) / span
    res_q = fd_q - (mp[1:-1] - p_cl[1:-1]) / m
    res_p = fd_p - (_force(h, mq[1:-1]) - _force(h, q_cl[1:-1]))
    se_fd_q = np.sqrt(sq[2:] ** 2 + sq[:-2] ** 2) / span + sp[1:-1] / m
    k = m * h.omega ** 2 if h.kind == HamiltonianKind.HARMONIC else 0.0
    se_fd_p = np.sqrt(sp[2:] ** 2 + sp[:-2] ** 2) / span + k * sq[1:-1]
    fd_ok = bool(np.all(np.abs(res_q) <= sigma * se_fd_q + atol) and np.all(np.abs(res_p) <= sigma * se_fd_p + atol))

    def worst(dev, se):
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, dev / se, np.where(dev > atol, np.inf, 0.0))
        return float(np.max(z)) if z.size else 0.0

    return {
        "passed": closed_ok and fd_ok,
        "closed_form": {"passed": closed_ok, "max_z_q": worst(dev_q, sq), "max_z_p": worst(dev_p, sp)},
        "finite_difference": {"passed": fd_ok, "max_z_q": worst(np.abs(res_q), se_fd_q),
                              "max_z_p": worst(np.abs(res_p), se_fd_p)},
        "n_times": int(len(t)),
        "n_trajectories": stats.n_trajectories,
    }


def martingale_check(stats: EnsembleStats, reference: Dict[str, np.ndarray], names: Optional[Sequence[str]] = None,
                     sigma: float = 3.0, atol: float = 1e-9) -> Dict[str, Any]:
    """|ensemble mean - master-equation prediction| <= sigma * SE at every output time"""
    names = list(names) if names is not None else [n for n in reference if n in stats.observables]
    report: Dict[str, Any] = {"passed": True, "observables": {}}
    for name in names:
        ref = np.asarray(reference[name], dtype=float)
        if ref.shape != stats.mean(name).shape:
            raise ConfigurationError(f"reference series '{name}' does not match the output times")
        dev = np.abs(stats.mean(name) - ref)
        se = stats.standard_error(name)
        ok = bool(np.all(dev <= sigma * se + atol))
        report["observables"][name] = {"passed": ok, "max_deviation": float(np.max(dev)),
                                       "max_standard_error": float(np.max(se))}
        report["passed"] = report["passed"] and ok
    return report


def energy_growth_check(stats: EnsembleStats, lambdas: Sequence[float], masses: Sequence[float],
                        tolerance: float = 0.05, name: str = "energy") -> Dict[str, Any]:
    """Slope of a linear fit to the ensemble mean energy against sum_n lambda_n hbar^2 / (2 m_n)"""
    t = stats.times
    if len(t) < 3:
        raise ResolutionError(f"need at least 3 output times, got {len(t)}")
    if len(lambdas) != len(masses):
        raise ConfigurationError("need one mass per collapse rate")
    expected = math.fsum(energy_growth_rate(lam, m) for lam, m in zip(lambdas, masses))
    mean = stats.mean(name)
    if not np.all(np.isfinite(mean)):
        raise FitError(f"ensemble mean of '{name}' is not finite")
    slope = float(np.polyfit(t, mean, 1)[0])
    deviation = abs(slope / expected - 1.0) if expected > 0 else abs(slope)
    logger.info(f"Energy growth: slope {slope:.4g}, expected {expected:.4g}")
    return {"passed": bool(deviation <= tolerance), "slope": slope, "expected": expected,
            "relative_deviation": float(deviation)}


def _fit_window(t: np.ndarray, v: np.ndarray, mask: np.ndarray, label: str) -> float:
    sel = mask & (t > 0)
    if np.count_nonzero(sel) < 3:
        raise HorizonError(f"{label} regime has fewer than 3 output times")
    if np.any(v[sel] <= 0):
        raise FitError(f"{label} regime has non-positive variance")
    slope, _ = np.polyfit(np.log(t[sel]), np.log(v[sel]), 1)
    return float(slope)


def trajectory_variance_scaling(stats: EnsembleStats, crossover: float, name: str = "mean_q",
                                early_factor: float = 0.05, late_factor: float = 10.0) -> Dict[str, float]:
    """Log-log slopes of V[<Q>_t] below crossover*early_factor and above crossover*late_factor"""
    t = stats.times
    if crossover <= 0:
        raise ConfigurationError("crossover time must be positive")
    if t[-1] < 100.0 * crossover:
        raise HorizonError(f"horizon {t[-1]:g} does not reach 100 x crossover ({crossover:g})")
    v = stats.variance(name)
    early = _fit_window(t, v, t <= early_factor * crossover, "early")
    late = _fit_window(t, v, t >= late_factor * crossover, "late")
    logger.info(f"Variance scaling exponents: early {early:.3f}, late {late:.3f}")
    return {"early_exponent": early, "late_exponent": late, "crossover": crossover}


def subsample_standard_error_ratio(stats: EnsembleStats, name: str, fraction: int = 4) -> float:
    """Median over times of SE(first n/fraction trajectories) / SE(all); about sqrt(fraction)"""
    if stats.series is None:
        raise ConfigurationError("run_ensemble(keep_series=True) is required for subsampling")
    rows = stats.series[name]
    n_sub = rows.shape[0] // fraction
    if n_sub < 2:
        raise ConfigurationError("too few trajectories to subsample")
    sub = ObservableStats.from_rows(rows[:n_sub]).standard_error
    full = stats.standard_error(name)
    valid = full > 0
    if not np.any(valid):
        raise FitError(f"standard error of '{name}' vanishes")
    return float(np.median(sub[valid] / full[valid]))


def outcome_fraction(records: Sequence[Dict[str, Any]], key: str, value: Any) -> float:
    if not records:
        return math.nan
    return sum(1 for r in records if r.get(key) == value) / len(records)
