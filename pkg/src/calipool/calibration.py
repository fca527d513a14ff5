"""Study-specific linear calibration of local-lab measurements to the reference lab.

Each local-laboratory study gets an ordinary least squares fit of the
reference measurement on the local measurement, estimated from its
controls-only calibration subset.  The fitted line is then used to
materialize analysis exposures in one of two ways: full calibration
(everyone gets the fitted value) or internalized (reference measurements
are kept where available).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .data import LabKind, Study, Subject
from .errors import (
    DataError,
    DegenerateCalibrationError,
    InsufficientDataError,
    MissingExposureError,
    SingularDesignError,
)

# Slopes this close to zero make both the calibrated exposures and the
# downstream slope division meaningless.
MIN_ABS_SLOPE = 1e-8


class ExposureSource(Enum):
    REFERENCE = "reference"
    CALIBRATED = "calibrated"


@dataclass(frozen=True, slots=True)
class CalibrationFit:
    """Fitted intercept/slope with model-based OLS covariance.

    ``cov`` is ordered (intercept, slope); ``resid_var`` uses the unbiased
    n-2 denominator.
    """

    study_id: str
    a_hat: float
    b_hat: float
    cov: np.ndarray
    resid_var: float
    n_cal: int


@dataclass(frozen=True, slots=True)
class CalibratedExposure:
    subject_id: str
    x_tilde: float
    source: ExposureSource


def fit_calibration(pairs: Sequence[tuple[float, float]], study_id: str = "") -> CalibrationFit:
    """OLS of the reference measurement on the local measurement.

    Parameters
    ----------
    pairs : sequence of (w, x)
        Local and reference measurements for the calibration subset.
    study_id : str
        Carried through for error messages and bookkeeping.

    Raises
    ------
    InsufficientDataError
        Fewer than 3 pairs.
    SingularDesignError
        All local measurements identical.
    DegenerateCalibrationError
        Fitted slope indistinguishable from zero.
    """
    n = len(pairs)
    if n < 3:
        raise InsufficientDataError(
            f"calibration for study {study_id!r} needs at least 3 pairs, got {n}"
        )
    arr = np.asarray(pairs, dtype=float)
    w, x = arr[:, 0], arr[:, 1]
    w_bar, x_bar = w.mean(), x.mean()
    dw = w - w_bar
    sww = float(dw @ dw)
    if sww <= 0.0:
        raise SingularDesignError(
            f"calibration for study {study_id!r}: local measurements have zero variance"
        )
    b_hat = float(dw @ (x - x_bar)) / sww
    a_hat = x_bar - b_hat * w_bar
    resid = x - a_hat - b_hat * w
    resid_var = float(resid @ resid) / (n - 2)
    var_b = resid_var / sww
    var_a = resid_var * (1.0 / n + w_bar**2 / sww)
    cov_ab = -resid_var * w_bar / sww
    cov = np.array([[var_a, cov_ab], [cov_ab, var_b]])
    if abs(b_hat) <= MIN_ABS_SLOPE:
        raise DegenerateCalibrationError(
            f"calibration slope for study {study_id!r} is {b_hat:.3g}; "
            "cannot be used downstream"
        )
    return CalibrationFit(study_id=study_id, a_hat=a_hat, b_hat=b_hat, cov=cov,
                          resid_var=resid_var, n_cal=n)


def fit_study_calibration(study: Study) -> CalibrationFit:
    """Fit the controls-only calibration model for one local-lab study."""
    if study.lab_kind is not LabKind.LOCAL:
        raise DataError(f"study {study.study_id!r} uses the reference laboratory")
    return fit_calibration(study.calibration_pairs(), study_id=study.study_id)


def _predicted(subject: Subject, fit: CalibrationFit) -> float:
    if subject.local_w is None:
        raise MissingExposureError(
            f"subject {subject.subject_id!r} has no local measurement to calibrate"
        )
    return fit.a_hat + fit.b_hat * subject.local_w


def apply_full_calibration(study: Study, fit: CalibrationFit) -> list[CalibratedExposure]:
    """Fitted value for every subject, discarding any reference measurements."""
    if study.lab_kind is not LabKind.LOCAL:
        raise DataError(f"study {study.study_id!r} is not a local-laboratory study")
    return [
        CalibratedExposure(s.subject_id, _predicted(s, fit), ExposureSource.CALIBRATED)
        for s in study.subjects()
    ]


def apply_internalized(study: Study, fit: CalibrationFit) -> list[CalibratedExposure]:
    """Reference measurement when available, fitted value otherwise."""
    if study.lab_kind is not LabKind.LOCAL:
        raise DataError(f"study {study.study_id!r} is not a local-laboratory study")
    out = []
    for s in study.subjects():
        if s.ref_x is not None:
            out.append(CalibratedExposure(s.subject_id, float(s.ref_x),
                                          ExposureSource.REFERENCE))
        else:
            out.append(CalibratedExposure(s.subject_id, _predicted(s, fit),
                                          ExposureSource.CALIBRATED))
    return out


def reference_passthrough(study: Study) -> list[CalibratedExposure]:
    """Exposures for a study already measured at the reference laboratory."""
    out = []
    for s in study.subjects():
        if s.ref_x is None:
            raise MissingExposureError(
                f"subject {s.subject_id!r} in reference study {study.study_id!r} "
                "has no reference measurement"
            )
        out.append(CalibratedExposure(s.subject_id, float(s.ref_x), ExposureSource.REFERENCE))
    return out


def exposure_lookup(
    calibrated: Sequence[CalibratedExposure],
) -> Callable[[Subject], float]:
    """Subject accessor over a list of materialized exposures."""
    table = {c.subject_id: c.x_tilde for c in calibrated}

    def accessor(subject: Subject) -> float:
        try:
            return table[subject.subject_id]
        except KeyError:
            raise MissingExposureError(
                f"no calibrated exposure for subject {subject.subject_id!r}"
            ) from None

    return accessor
