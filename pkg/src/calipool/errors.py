"""Exception types shared across the package."""


class CalipoolError(Exception):
    """Base class for all calipool errors."""


class DataError(CalipoolError):
    """A dataset or input file violates a structural requirement."""


class MissingExposureError(DataError):
    """A subject lacks the exposure measurement an operation requires."""


class InsufficientDataError(CalipoolError):
    """Too few observations to fit a model."""


class SingularDesignError(CalipoolError):
    """A design or information matrix is singular (no usable contrast)."""


class DegenerateCalibrationError(CalipoolError):
    """Calibration slope is too close to zero to use downstream."""


class EstimationError(CalipoolError):
    """Numerical failure while computing an estimate."""
