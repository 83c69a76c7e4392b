"""Tests for unit systems and conversions"""

import pytest

from collapsar.errors import UnitError
from collapsar.units import (
    HBAR_SI,
    INVERSE_AREA,
    LENGTH,
    LOCALIZATION_RATE,
    Quantity,
    UnitSystem,
    convert,
    hbar,
)


class TestUnits:
    """Dimensional bookkeeping"""

    def test_alpha_cgs_to_si(self):
        alpha = convert(1e10, UnitSystem.cgs(), UnitSystem.si(), INVERSE_AREA)
        assert alpha == pytest.approx(1e14)

    def test_quantity_conversion(self):
        q = convert(Quantity(2.0, LENGTH), UnitSystem.cgs(), UnitSystem.si())
        assert q.value == pytest.approx(0.02)
        assert q.dimension == LENGTH

    def test_natural_units_have_unit_hbar(self):
        units = UnitSystem.natural(1e-9, 1.7e-27)
        assert hbar(units) == pytest.approx(1.0)
        assert hbar(UnitSystem.si()) == HBAR_SI

    def test_round_trip_through_natural_units(self):
        units = UnitSystem.natural(1e-7, 1e-20)
        sim = convert(1e-2, UnitSystem.si(), units, LOCALIZATION_RATE)
        back = convert(sim, units, UnitSystem.si(), LOCALIZATION_RATE)
        assert back == pytest.approx(1e-2)

    def test_mismatched_dimensions_raise(self):
        with pytest.raises(UnitError):
            Quantity(1.0, LENGTH) + Quantity(1.0, INVERSE_AREA)
        with pytest.raises(UnitError):
            convert(Quantity(1.0, LENGTH), UnitSystem.si(), UnitSystem.cgs(), INVERSE_AREA)
        with pytest.raises(UnitError):
            convert(1.0, UnitSystem.si(), UnitSystem.cgs())

    def test_invalid_scale(self):
        with pytest.raises(UnitError):
            UnitSystem(length_scale=0.0)
