"""Unit systems and dimensional bookkeeping between SI and simulation units"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Union
import logging

from .errors import UnitError

logger = logging.getLogger(__name__)

HBAR_SI = 1.054571817e-34  # J s


@dataclass(frozen=True)
class Dimension:
    """Exponents of length, time and mass"""
    length: int = 0
    time: int = 0
    mass: int = 0

    def __mul__(self, other: "Dimension") -> "Dimension":
        return Dimension(self.length + other.length, self.time + other.time, self.mass + other.mass)

    def __truediv__(self, other: "Dimension") -> "Dimension":
        return Dimension(self.length - other.length, self.time - other.time, self.mass - other.mass)

    def __pow__(self, power: int) -> "Dimension":
        return Dimension(self.length * power, self.time * power, self.mass * power)

    def __str__(self) -> str:
        parts = [f"{sym}^{exp}" for sym, exp in (("L", self.length), ("T", self.time), ("M", self.mass)) if exp]
        return " ".join(parts) or "1"


DIMENSIONLESS = Dimension()
LENGTH = Dimension(length=1)
TIME = Dimension(time=1)
MASS = Dimension(mass=1)
RATE = Dimension(time=-1)                      # GRW frequency
INVERSE_AREA = Dimension(length=-2)            # alpha
LOCALIZATION_RATE = Dimension(length=-2, time=-1)  # QMUPL lambda
VOLUME_RATE = Dimension(length=3, time=-1)     # CSL gamma
ACTION = Dimension(length=2, time=-1, mass=1)
ENERGY = Dimension(length=2, time=-2, mass=1)


@dataclass(frozen=True)
class Quantity:
    value: float
    dimension: Dimension = DIMENSIONLESS

    def __add__(self, other: "Quantity") -> "Quantity":
        if other.dimension != self.dimension:
            raise UnitError(f"cannot add {other.dimension} to {self.dimension}")
        return Quantity(self.value + other.value, self.dimension)

    def __mul__(self, other: Union["Quantity", float]) -> "Quantity":
        if isinstance(other, Quantity):
            return Quantity(self.value * other.value, self.dimension * other.dimension)
        return Quantity(self.value * other, self.dimension)

    def __truediv__(self, other: Union["Quantity", float]) -> "Quantity":
        if isinstance(other, Quantity):
            return Quantity(self.value / other.value, self.dimension / other.dimension)
        return Quantity(self.value / other, self.dimension)


@dataclass(frozen=True)
class UnitSystem:
    """SI size of one unit of length, time and mass"""
    length_scale: float = 1.0
    time_scale: float = 1.0
    mass_scale: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        for field_name in ("length_scale", "time_scale", "mass_scale"):
            if not getattr(self, field_name) > 0:
                raise UnitError(f"{field_name} must be positive, got {getattr(self, field_name)}")

    def scale(self, dimension: Dimension) -> float:
        """SI value of one unit of the given dimension in this system"""
        return (self.length_scale ** dimension.length
                * self.time_scale ** dimension.time
                * self.mass_scale ** dimension.mass)

    @classmethod
    def si(cls) -> "UnitSystem":
        return cls(1.0, 1.0, 1.0, name="si")

    @classmethod
    def cgs(cls) -> "UnitSystem":
        return cls(1e-2, 1.0, 1e-3, name="cgs")

    @classmethod
    def natural(cls, length_scale: float, mass_scale: float) -> "UnitSystem":
        """Simulation units with hbar = 1: the time unit is mass_scale * length_scale^2 / hbar"""
        time_scale = mass_scale * length_scale ** 2 / HBAR_SI
        return cls(length_scale, time_scale, mass_scale, name="natural")

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "length_scale": self.length_scale,
                "time_scale": self.time_scale, "mass_scale": self.mass_scale}


def convert(value: Union[Quantity, float], from_units: UnitSystem, to_units: UnitSystem,
            dimension: Optional[Dimension] = None) -> Union[Quantity, float]:
    """Re-express a value given in ``from_units`` in ``to_units``.

    Plain floats need an explicit ``dimension``. For a Quantity, a ``dimension`` that
    disagrees with the quantity's own raises UnitError.
    """
    if isinstance(value, Quantity):
        if dimension is not None and dimension != value.dimension:
            raise UnitError(f"expected a quantity of dimension {dimension}, got {value.dimension}")
        factor = from_units.scale(value.dimension) / to_units.scale(value.dimension)
        return Quantity(value.value * factor, value.dimension)
    if dimension is None:
        raise UnitError("converting a bare number needs an explicit dimension")
    return value * from_units.scale(dimension) / to_units.scale(dimension)


def hbar(units: UnitSystem) -> float:
    """Reduced Planck constant expressed in ``units``"""
    return HBAR_SI / units.scale(ACTION)
