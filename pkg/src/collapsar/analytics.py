"""Closed-form predictions, SI-scale formulas, mass density and phenomenology tables"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging
import math

import numpy as np

from .core import HBAR, GridWavefunction, SpatialGrid
from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

# Standard parameter values (SI unless noted)
GRW_LAMBDA = 1e-16          # s^-1
GRW_ALPHA_CM = 1e10         # cm^-2
QMUPL_M0 = 1.7e-27          # kg
QMUPL_LAMBDA0 = 1e-2        # m^-2 s^-1
EARTH_MASS = 5.97e24        # kg
GRAM = 1e-3                 # kg

# Quoted data rows the SI formulas are fitted to: (mass kg, value)
SPREAD_ROWS: Tuple[Tuple[float, float], ...] = ((GRAM, 4.6e-14), (EARTH_MASS, 5.9e-28))
VARIANCE_ROWS: Tuple[Tuple[float, float], ...] = ((GRAM, 1.1e-31), (EARTH_MASS, 1.8e-59))
VARIANCE_CROSSOVER = 2.0e4  # s

SPREAD_QUOTED_1KG = 1.5e-15  # m

# Where a row comes from: the decoherence-rate table, the bounds table, the standard GRW values,
# the asymptotic-spread formula, or an evaluation made here
SOURCE_TAGS = ("Table 1", "Table 2", "Eq. 4", "Eq. 11", "computed")


def _fit_power_law(rows: Sequence[Tuple[float, float]], exponent: Optional[float] = None) -> Tuple[float, float]:
    """(prefactor at M = 1 kg, exponent) of value = prefactor * M^(-exponent) through log-space least squares"""
    logm = np.log([m for m, _ in rows])
    logv = np.log([v for _, v in rows])
    if exponent is None:
        slope, intercept = np.polyfit(logm, logv, 1)
        return float(math.exp(intercept)), float(-slope)
    return float(math.exp(np.mean(logv + exponent * logm))), exponent


# The 1 g and Earth rows are not both consistent with SPREAD_QUOTED_1KG. The fit through them gives
# about 1.45e-15 m at 1 kg, 3.5% under the quoted prefactor, and keeps both rows within 2%.
SPREAD_PREFACTOR, _ = _fit_power_law(SPREAD_ROWS, exponent=0.5)
_VARIANCE_1KG, VARIANCE_MASS_EXPONENT = _fit_power_law(VARIANCE_ROWS)
VARIANCE_PREFACTOR = _VARIANCE_1KG * GRAM ** -VARIANCE_MASS_EXPONENT  # m^2/s at 1 g


@dataclass
class MassDensityField:
    grid: SpatialGrid
    values: np.ndarray
    masses: Tuple[float, ...]

    @property
    def integral(self) -> float:
        return float(np.sum(self.values) * self.grid.dx)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses)


def mass_density(psi: GridWavefunction, masses: Sequence[float]) -> MassDensityField:
    """Sum over particles of m_n times the particle's position marginal"""
    if psi.batch_shape:
        raise ShapeError("mass_density expects a single state")
    if len(masses) != psi.n_particles:
        raise ConfigurationError(f"need {psi.n_particles} masses, got {len(masses)}")
    if any(m <= 0 for m in masses):
        raise ConfigurationError("masses must be positive")
    values = sum(m * psi.marginal(n) for n, m in enumerate(masses))
    return MassDensityField(psi.grid, np.maximum(values, 0.0), tuple(float(m) for m in masses))


def asymptotic_spread_si(mass_kg: float) -> float:
    """Stationary position spread of a free body of the given mass, in metres"""
    if not mass_kg > 0:
        raise ConfigurationError(f"mass must be positive, got {mass_kg}")
    return SPREAD_PREFACTOR * math.sqrt(1.0 / mass_kg)


@dataclass
class VariancePrediction:
    value: float
    regime: str
    mass_exponent: float = VARIANCE_MASS_EXPONENT

    def to_dict(self) -> Dict[str, Any]:
        return {"value": self.value, "units": "m^2", "regime": self.regime, "mass_exponent": self.mass_exponent}


def trajectory_variance_si(mass_kg: float, t_s: float) -> VariancePrediction:
    """V[<Q>_t] in m^2; linear in t below the crossover, t^3 extrapolation above it"""
    if not mass_kg > 0:
        raise ConfigurationError(f"mass must be positive, got {mass_kg}")
    if t_s < 0:
        raise ConfigurationError(f"time must be non-negative, got {t_s}")
    rate = VARIANCE_PREFACTOR * (GRAM / mass_kg) ** VARIANCE_MASS_EXPONENT
    if t_s < VARIANCE_CROSSOVER:
        return VariancePrediction(rate * t_s, "linear")
    return VariancePrediction(rate * VARIANCE_CROSSOVER * (t_s / VARIANCE_CROSSOVER) ** 3, "cubic")


def energy_growth_rate(lam: float, mass: float, hbar: float = HBAR) -> float:
    """d<H>/dt = lambda hbar^2 / (2m) per particle"""
    if lam < 0 or not mass > 0:
        raise ConfigurationError("need lambda >= 0 and mass > 0")
    return lam * hbar ** 2 / (2.0 * mass)


def lambda_for_mass(mass_kg: float) -> float:
    """Mass-proportional QMUPL rate (m / m0) lambda0 in m^-2 s^-1"""
    if not mass_kg > 0:
        raise ConfigurationError(f"mass must be positive, got {mass_kg}")
    return mass_kg / QMUPL_M0 * QMUPL_LAMBDA0


@dataclass
class PhenoRow:
    label: str
    value: float
    units: str
    source: str
    uncertainty_decades: Optional[int] = None

    def __post_init__(self):
        if self.source not in SOURCE_TAGS:
            raise ConfigurationError(f"unknown source tag '{self.source}'")

    def to_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "value": self.value, "units": self.units, "source": self.source,
                "uncertainty_decades": self.uncertainty_decades}


@dataclass
class PhenoTable:
    rows: List[PhenoRow] = field(default_factory=list)

    def add(self, label: str, value: float, units: str, source: str, uncertainty_decades: Optional[int] = None):
        self.rows.append(PhenoRow(label, value, units, source, uncertainty_decades))

    def find(self, label: str) -> PhenoRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def by_source(self, source: str) -> List[PhenoRow]:
        return [r for r in self.rows if r.source == source]

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


DECOHERENCE_RATES = (
    ("Air molecules", 1e36, 1e30),
    ("Laboratory vacuum", 1e23, 1e17),
    ("Sunlight on earth", 1e21, 1e13),
    ("300K photons", 1e19, 1e6),
    ("Cosmic background radiation", 1e6, 1e-12),
    ("COLLAPSE", 1e7, 1e-2),
)

LAMBDA0_BOUNDS = (
    ("Fullerene diffraction", 5e12, None),
    ("Decay of super-currents", 1e14, None),
    ("Radiation by free electrons", 1e12, None),
    ("11 KeV photons from Ge", 3e14, None),
    ("Proton decay", 1e18, None),
    ("Hydrogen dissociation", 4e17, None),
    ("Heating of protons", 1e12, None),
    ("I.G.M.", 1e8, 1),
    ("Inter-stellar dust grains", 1e15, None),
)


def pheno_tables(masses_kg: Sequence[float] = ()) -> PhenoTable:
    """Bundled phenomenology values, plus computed rate, spread and variance rows for the given masses"""
    table = PhenoTable()
    for cause, dust, molecule in DECOHERENCE_RATES:
        table.add(f"{cause}: dust particle (1e-3 cm)", dust, "cm^-2 s^-1", "Table 1")
        table.add(f"{cause}: large molecule (1e-6 cm)", molecule, "cm^-2 s^-1", "Table 1")
    for name, factor, decades in LAMBDA0_BOUNDS:
        table.add(f"lambda0 upper bound: {name}", factor, "lambda0", "Table 2", decades)
    table.add("lambda0 enhancement for latent-image formation", 2e9, "lambda0", "Table 2", 2)
    table.add("GRW lambda", GRW_LAMBDA, "s^-1", "Eq. 4")
    table.add("GRW alpha", GRW_ALPHA_CM, "cm^-2", "Eq. 4")
    table.add("sigma_q(inf) prefactor (1 kg)", SPREAD_QUOTED_1KG, "m", "Eq. 11")
    table.add("sigma_q(inf): 1 g object", SPREAD_ROWS[0][1], "m", "Eq. 11")
    table.add("sigma_q(inf): Earth", SPREAD_ROWS[1][1], "m", "Eq. 11")
    for m in masses_kg:
        table.add(f"lambda_n: {m:g} kg", lambda_for_mass(m), "m^-2 s^-1", "computed")
        table.add(f"sigma_q(inf): {m:g} kg", asymptotic_spread_si(m), "m", "computed")
        table.add(f"V[<Q>_t]/t: {m:g} kg", trajectory_variance_si(m, 1.0).value, "m^2 s^-1", "computed")
    return table


def fit_report() -> Dict[str, Any]:
    """Constants fitted to the quoted data rows"""
    return {
        "spread_prefactor_m": SPREAD_PREFACTOR,
        "variance_prefactor_m2_per_s": VARIANCE_PREFACTOR,
        "variance_mass_exponent": VARIANCE_MASS_EXPONENT,
    }
