"""Error hierarchy shared by every collapsar module"""

from typing import List, Optional


class CollapsarError(Exception):
    """Base class for all collapsar errors"""


class ConfigurationError(CollapsarError, ValueError):
    """Invalid grid, parameters or run configuration.

    ``problems`` holds one ``"<field>: <message>"`` entry per offending field.
    """

    def __init__(self, message: str, problems: Optional[List[str]] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class UnitError(CollapsarError, ValueError):
    """Dimensional mismatch in a unit conversion"""


class ShapeError(CollapsarError, ValueError):
    """Arrays or states defined on incompatible grids"""


class DegenerateStateError(CollapsarError, RuntimeError):
    """A state whose norm vanished; the trajectory must be aborted"""


class DegenerateJumpError(DegenerateStateError):
    """A localization jump landed where the state has (numerically) no support"""


class StepSizeError(CollapsarError, RuntimeError):
    """Time step violates a stability or accuracy guard"""


class FitError(CollapsarError, RuntimeError):
    """A regression could not be performed on the supplied series"""


class HorizonError(FitError):
    """Series does not cover the time regimes needed for the fit"""


class ResolutionError(CollapsarError, RuntimeError):
    """Output sampling is too coarse for the requested check"""


class EnsembleError(CollapsarError, RuntimeError):
    """Too many trajectories of an ensemble failed"""


class AcceptanceError(CollapsarError, RuntimeError):
    """A self-test acceptance check did not pass"""
