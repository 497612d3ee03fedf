from typing import Iterable, Optional


class PFDAError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(PFDAError, ValueError):
    """Invalid configuration value, optionally naming the offending field."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ShapeError(PFDAError, ValueError):
    pass


class BoundsError(PFDAError, ValueError):
    """Crop box leaves the volume along ``axis``."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"axis {axis}: {message}")


class VolumeFormatError(PFDAError, ValueError):
    """Malformed ``.pfda`` header or payload."""


class InvariantError(PFDAError, ValueError):
    pass


class EstimatorUndefinedError(PFDAError, ValueError):
    pass


class EmptyBatchError(PFDAError, ValueError):
    pass


class NumericError(PFDAError, ArithmeticError):
    pass


class NonFiniteLossError(NumericError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float, step: Optional[int] = None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}' = {value}{where}")


class SurfaceUndefinedError(PFDAError, ValueError):
    pass


class DegenerateVarianceError(PFDAError, ValueError):
    pass


class UndefinedCorrelationError(PFDAError, ValueError):
    pass


class AlignmentError(PFDAError, ValueError):
    """Two runs did not evaluate the same set of cases."""

    def __init__(self, unmatched: Iterable[str]):
        self.unmatched = sorted(unmatched)
        super().__init__(f"unmatched case ids: {', '.join(self.unmatched)}")


class CheckpointError(PFDAError, ValueError):
    pass
