"""Two-stage pooling: per-study adjusted fits combined by fixed-effects meta-analysis.

Stage one fits each study separately: reference-laboratory studies get a
plain conditional-logistic fit, local-laboratory studies get a fit on the
raw local measurements whose coefficients are then corrected with the
study's calibration line.  The main-effect correction divides the local
coefficient by the calibration slope and propagates slope uncertainty; with
an exposure-modifier interaction the correction also moves a piece of the
modifier coefficient, and its covariance comes from the delta method
treating the stage-one coefficients and the calibration line as
asymptotically independent blocks.  Stage two pools per coefficient with
inverse-variance weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import clogit
from ._assembly import FlatStudy, StudyExposures, build_assembly, flatten_study
from .calibration import CalibrationFit, fit_study_calibration
from .data import DesignSpec, LabKind, PooledDataset, Study, validate
from .errors import DataError, DegenerateCalibrationError, EstimationError


@dataclass(frozen=True)
class StudyEstimate:
    """Stage-one coefficients for one study, on the reference-exposure scale."""

    study_id: str
    names: tuple[str, ...]
    coef: np.ndarray
    cov: np.ndarray
    adjusted: bool

    def variance(self, name: str) -> float:
        i = self.names.index(name)
        return float(self.cov[i, i])


@dataclass(frozen=True)
class MetaResult:
    """Inverse-variance pooled coefficients with per-study diagnostics."""

    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    weights: np.ndarray      # (n_studies, p), columns sum to 1
    q_stat: np.ndarray       # per-coefficient heterogeneity, descriptive only
    study_ids: tuple[str, ...]
    studies: tuple[StudyEstimate, ...]


def _check_slope(fit: CalibrationFit) -> float:
    if abs(fit.b_hat) <= 1e-8:
        raise DegenerateCalibrationError(
            f"calibration slope for study {fit.study_id!r} is numerically zero"
        )
    return fit.b_hat


def _adjustment_jacobian(names: tuple[str, ...], coef: np.ndarray,
                         fit: CalibrationFit, interaction: bool) -> np.ndarray:
    """Jacobian of the corrected coefficients in (stage-one coefs, a, b)."""
    p = len(names)
    a, b = fit.a_hat, fit.b_hat
    jac = np.zeros((p, p + 2))
    jac[:, :p] = np.eye(p)
    ix = names.index("x")
    jac[ix, ix] = 1.0 / b
    jac[ix, p + 1] = -coef[ix] / b**2
    if interaction:
        iv, ixv = names.index("v"), names.index("xv")
        jac[iv, ixv] = -a / b
        jac[iv, p] = -coef[ixv] / b
        jac[iv, p + 1] = a * coef[ixv] / b**2
        jac[ixv, ixv] = 1.0 / b
        jac[ixv, p + 1] = -coef[ixv] / b**2
    return jac


def _adjust(naive: StudyEstimate, fit: CalibrationFit, interaction: bool) -> StudyEstimate:
    b = _check_slope(fit)
    coef = naive.coef.copy()
    ix = naive.names.index("x")
    coef[ix] = naive.coef[ix] / b
    if interaction:
        iv, ixv = naive.names.index("v"), naive.names.index("xv")
        coef[iv] = naive.coef[iv] - fit.a_hat * naive.coef[ixv] / b
        coef[ixv] = naive.coef[ixv] / b
    jac = _adjustment_jacobian(naive.names, naive.coef, fit, interaction)
    p = len(naive.names)
    big = np.zeros((p + 2, p + 2))
    big[:p, :p] = naive.cov
    big[p:, p:] = fit.cov
    cov = jac @ big @ jac.T
    return StudyEstimate(study_id=naive.study_id, names=naive.names, coef=coef,
                         cov=0.5 * (cov + cov.T), adjusted=True)


def adjust_main(naive: StudyEstimate, fit: CalibrationFit) -> StudyEstimate:
    """Divide the exposure coefficient by the calibration slope.

    The exposure variance becomes
    ``var(x)/b^2 + coef(x)^2 var(b)/b^4``; covariate coefficients pass
    through with their stage-one variances.
    """
    if "v" in naive.names or "xv" in naive.names:
        raise ValueError("use adjust_interaction for interaction designs")
    return _adjust(naive, fit, interaction=False)


def adjust_interaction(naive: StudyEstimate, fit: CalibrationFit) -> StudyEstimate:
    """Correct (x, v, xv) jointly for the calibration line.

    Point estimates: x and xv are divided by the slope; v loses
    ``a * coef(xv) / b``.  The covariance is the delta method over the
    stage-one coefficients and the calibration pair, taken as independent
    blocks.
    """
    for required in ("x", "v", "xv"):
        if required not in naive.names:
            raise ValueError(f"stage-one fit lacks coefficient {required!r}")
    return _adjust(naive, fit, interaction=True)


def meta_fixed(estimates: list[StudyEstimate]) -> MetaResult:
    """Per-coefficient fixed-effects pooling with inverse-variance weights."""
    if not estimates:
        raise ValueError("no study estimates to pool")
    names = estimates[0].names
    for e in estimates:
        if e.names != names:
            raise ValueError(
                f"study {e.study_id!r} has coefficients {e.names}, expected {names}"
            )
    p = len(names)
    coefs = np.array([e.coef for e in estimates])
    variances = np.array([np.diag(e.cov) for e in estimates])
    for e, var in zip(estimates, variances):
        if np.any(var <= 0):
            raise EstimationError(
                f"study {e.study_id!r} has a non-positive coefficient variance"
            )
    w = 1.0 / variances
    w_sum = w.sum(axis=0)
    pooled = (w * coefs).sum(axis=0) / w_sum
    se = np.sqrt(1.0 / w_sum)
    q_stat = (w * (coefs - pooled) ** 2).sum(axis=0)
    return MetaResult(
        names=names,
        coef=pooled,
        se=se,
        weights=w / w_sum,
        q_stat=q_stat,
        study_ids=tuple(e.study_id for e in estimates),
        studies=tuple(estimates),
    )


def _stage_one_flat(flat: FlatStudy, design: DesignSpec) -> StudyEstimate:
    """Conditional-logistic fit of one flattened study on its own measurements."""
    n = flat.n_members
    x_tilde = flat.w if flat.local else flat.x
    exposures = StudyExposures(x_tilde=x_tilde, calibrated=np.zeros(n, bool), fit=None)
    assembly = build_assembly([flat], [exposures], design)
    cfit = clogit.fit(assembly.problem)
    if not cfit.converged:
        raise EstimationError(
            f"stage-one fit for study {flat.study_id!r} did not converge: {cfit.message}"
        )
    return StudyEstimate(
        study_id=flat.study_id,
        names=design.coefficient_names(),
        coef=cfit.beta,
        cov=np.linalg.inv(cfit.info),
        adjusted=False,
    )


def _stage_one(study: Study, design: DesignSpec) -> StudyEstimate:
    return _stage_one_flat(flatten_study(study), design)


def _twostage_from_flats(
    flats: list[FlatStudy],
    fits: dict[str, CalibrationFit],
    design: DesignSpec,
) -> MetaResult:
    per_study = []
    for flat in flats:
        est = _stage_one_flat(flat, design)
        if flat.local:
            fit = fits[flat.study_id]
            if design.include_interaction:
                est = adjust_interaction(est, fit)
            else:
                est = adjust_main(est, fit)
        per_study.append(est)
    return meta_fixed(per_study)


def estimate_twostage(dataset: PooledDataset, design: DesignSpec | None = None) -> MetaResult:
    """Stage-one fits (adjusted where calibrated) pooled by fixed-effects meta-analysis."""
    design = design or dataset.design
    issues = validate(dataset)
    if issues:
        shown = "; ".join(str(i) for i in issues[:5])
        raise DataError(f"dataset is not estimation-ready: {shown}")
    flats = [flatten_study(s) for s in dataset.studies]
    fits = {
        s.study_id: fit_study_calibration(s)
        for s in dataset.studies
        if s.lab_kind is LabKind.LOCAL
    }
    return _twostage_from_flats(flats, fits, design)
