"""Outcome basin classifier - assigns collapsing trajectories to pointer or position basins"""

from typing import Any, Dict, List, Optional, Sequence, Tuple
from enum import Enum
import logging

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

INDETERMINATE = -1


class Outcome(Enum):
    """Measurement outcomes for a two-basin pointer"""
    PLUS = "+"
    MINUS = "-"
    INDETERMINATE = "indeterminate"


class BasinTracker:
    """Streaming classifier for a batch of trajectories.

    A trajectory sits in basin k while |position - centers[k]| < tolerance (and the optional
    extra condition holds). It is classified into k once it has stayed there for
    ``hold_steps`` consecutive updates; the outcome reported at the horizon is the basin
    whose streak is still at least ``hold_steps`` long, otherwise indeterminate.
    """

    def __init__(self, centers: Sequence[float], tolerance: float, hold_steps: int = 100,
                 batch_shape: Tuple[int, ...] = ()):
        if len(centers) < 2:
            raise ConfigurationError("basin classification needs at least two centers")
        if tolerance <= 0 or hold_steps < 1:
            raise ConfigurationError("basin tolerance and hold_steps must be positive")
        self.centers = np.asarray(centers, dtype=float)
        self.tolerance = float(tolerance)
        self.hold_steps = int(hold_steps)
        self.streaks = np.zeros(tuple(batch_shape) + (len(self.centers),), dtype=np.int64)
        self.first_classified_step = np.full(tuple(batch_shape), -1, dtype=np.int64)
        self.steps = 0

    def update(self, positions: np.ndarray, condition: Optional[np.ndarray] = None) -> None:
        positions = np.asarray(positions, dtype=float)
        inside = np.abs(positions[..., None] - self.centers) < self.tolerance
        if condition is not None:
            inside &= np.asarray(condition, dtype=bool)[..., None]
        self.streaks = np.where(inside, self.streaks + 1, 0)
        self.steps += 1
        newly = (self.first_classified_step < 0) & np.any(self.streaks >= self.hold_steps, axis=-1)
        self.first_classified_step = np.where(newly, self.steps, self.first_classified_step)

    def outcomes(self) -> np.ndarray:
        """Basin index per trajectory at the current step, -1 when indeterminate"""
        held = self.streaks >= self.hold_steps
        return np.where(np.any(held, axis=-1), np.argmax(held, axis=-1), INDETERMINATE)

    def get_statistics(self) -> Dict[str, Any]:
        out = np.atleast_1d(self.outcomes())
        counts = {int(k): int(np.sum(out == k)) for k in range(len(self.centers))}
        return {
            "total": int(out.size),
            "counts": counts,
            "indeterminate": int(np.sum(out == INDETERMINATE)),
            "hold_steps": self.hold_steps,
            "tolerance": self.tolerance,
        }


def outcome_label(index: int, labels: Sequence[Outcome] = (Outcome.PLUS, Outcome.MINUS)) -> Outcome:
    return Outcome.INDETERMINATE if index == INDETERMINATE else labels[index]


def binomial_summary(successes: int, total: int, expected: Optional[float] = None) -> Dict[str, Any]:
    """Frequency, binomial standard error and deviation from an expected probability"""
    if total <= 0:
        return {"successes": successes, "total": total, "frequency": float("nan"), "standard_error": float("nan")}
    freq = successes / total
    p = expected if expected is not None else freq
    se = float(np.sqrt(max(p * (1 - p), 0.0) / total))
    summary = {"successes": successes, "total": total, "frequency": freq, "standard_error": se}
    if expected is not None:
        summary["expected"] = expected
        summary["z_score"] = (freq - expected) / se if se > 0 else (0.0 if freq == expected else float("inf"))
    return summary


def outcome_counts(outcomes: List[Outcome]) -> Dict[str, int]:
    counts = {o.value: 0 for o in Outcome}
    for o in outcomes:
        counts[o.value] += 1
    return counts
