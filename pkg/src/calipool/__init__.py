"""Calibration and pooling of biomarker data from matched nested case-control studies."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("calipool")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0+unknown"

from .calibration import (
    CalibratedExposure,
    CalibrationFit,
    ExposureSource,
    apply_full_calibration,
    apply_internalized,
    fit_calibration,
    fit_study_calibration,
)
from .data import (
    DesignSpec,
    LabKind,
    PooledDataset,
    Stratum,
    Study,
    Subject,
    ValidationIssue,
    stratum_differences,
    validate,
)
from .methods import AGGREGATED_METHODS, ALL_METHODS, PoolingMethod

__all__ = [
    "AGGREGATED_METHODS",
    "ALL_METHODS",
    "CalibratedExposure",
    "CalibrationFit",
    "DesignSpec",
    "ExposureSource",
    "LabKind",
    "PooledDataset",
    "PoolingMethod",
    "Stratum",
    "Study",
    "Subject",
    "ValidationIssue",
    "apply_full_calibration",
    "apply_internalized",
    "fit_calibration",
    "fit_study_calibration",
    "stratum_differences",
    "validate",
    "__version__",
]
