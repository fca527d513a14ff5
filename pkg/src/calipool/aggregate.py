"""Aggregated pooled estimators with stacked-estimating-equation variances.

The aggregated analysis pools every study's strata into one conditional
logistic regression after materializing analysis exposures (naive,
internalized, or full calibration).  Because the calibration lines are
estimated rather than known, the covariance of the pooled coefficients is
taken from the sandwich of the stacked system

    theta = (a_1..a_Q, b_1..b_Q, beta),

whose estimating functions are the per-study OLS normal equations and the
pooled conditional-likelihood score.  Matched sets are the independent
units: a stratum's contribution carries its score term plus the OLS residual
terms of any calibration-subset members it contains, so the within-stratum
dependence between the two is kept.  The score-score block of the middle
matrix uses the observed information (the information identity), which makes
the estimator collapse exactly to the inverse information when no study
needs calibration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import clogit
from ._assembly import Assembly, FlatStudy, StudyExposures, build_assembly, flatten_study
from .calibration import CalibrationFit, fit_study_calibration
from .clogit import ClogitFit, ClogitProblem
from .data import DesignSpec, LabKind, PooledDataset, validate
from .errors import DataError, EstimationError, SingularDesignError
from .methods import AGGREGATED_METHODS, PoolingMethod


@dataclass(frozen=True)
class StackedSystem:
    """Assembled sandwich ingredients for one aggregated fit.

    ``theta`` concatenates the calibration intercepts, slopes, and the pooled
    coefficients; ``psi`` holds one row of stacked estimating-function
    contributions per stratum; ``a_matrix`` is minus the Jacobian of the
    summed contributions and ``b_matrix`` the middle matrix described in the
    module docstring.
    """

    theta: np.ndarray
    psi: np.ndarray
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    n_slots: int


@dataclass(frozen=True)
class AggregatedEstimate:
    method: PoolingMethod
    names: tuple[str, ...]
    beta: np.ndarray
    sandwich_cov: np.ndarray
    model_cov: np.ndarray
    calibration_fits: dict[str, CalibrationFit]
    fit_meta: ClogitFit

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sandwich_cov))


def _materialize(flat: FlatStudy, fit: CalibrationFit | None,
                 method: PoolingMethod) -> StudyExposures:
    """Per-member analysis exposures for one study under one method."""
    n = flat.n_members
    if not flat.local:
        return StudyExposures(x_tilde=flat.x, calibrated=np.zeros(n, bool), fit=None)
    if method is PoolingMethod.NAIVE:
        return StudyExposures(x_tilde=flat.w, calibrated=np.zeros(n, bool), fit=None)
    assert fit is not None
    fitted = fit.a_hat + fit.b_hat * flat.w
    if method is PoolingMethod.FULL_CALIBRATION:
        return StudyExposures(x_tilde=fitted, calibrated=np.ones(n, bool), fit=fit)
    if method is PoolingMethod.INTERNALIZED:
        have_ref = ~np.isnan(flat.x)
        return StudyExposures(
            x_tilde=np.where(have_ref, flat.x, fitted),
            calibrated=~have_ref,
            fit=fit,
        )
    raise ValueError(f"{method} is not an aggregated method")


def _check_ready(dataset: PooledDataset) -> None:
    issues = validate(dataset)
    if issues:
        shown = "; ".join(str(i) for i in issues[:5])
        more = f" (+{len(issues) - 5} more)" if len(issues) > 5 else ""
        raise DataError(f"dataset is not estimation-ready: {shown}{more}")


def _fit_calibrations(dataset: PooledDataset,
                      method: PoolingMethod) -> dict[str, CalibrationFit]:
    if method is PoolingMethod.NAIVE:
        return {}
    return {
        s.study_id: fit_study_calibration(s)
        for s in dataset.studies
        if s.lab_kind is LabKind.LOCAL
    }


def _assemble(dataset: PooledDataset, fits: dict[str, CalibrationFit],
              method: PoolingMethod, design: DesignSpec) -> Assembly:
    flats = [flatten_study(s) for s in dataset.studies]
    exposures = [_materialize(f, fits.get(f.study_id), method) for f in flats]
    return build_assembly(flats, exposures, design)


def estimate(
    dataset: PooledDataset,
    method: PoolingMethod,
    design: DesignSpec | None = None,
    calibration_fits: dict[str, CalibrationFit] | None = None,
) -> AggregatedEstimate:
    """Pooled aggregated estimate under one exposure-materialization method.

    Runs the two-step procedure: per-study calibration lines first, then the
    pooled conditional-logistic fit on the materialized exposures with the
    calibration estimates held fixed.  The returned covariance accounts for
    the first step through the stacked sandwich.  ``calibration_fits``
    replaces the internally fitted lines (keyed by study id); it is ignored
    for the naive method.

    Raises
    ------
    DataError
        Dataset fails validation.
    EstimationError
        The Newton solve did not converge (including detected separation).
    """
    if method not in AGGREGATED_METHODS:
        raise ValueError(f"method {method} is not an aggregated method")
    design = design or dataset.design
    _check_ready(dataset)
    if calibration_fits is not None and method is not PoolingMethod.NAIVE:
        fits = dict(calibration_fits)
    else:
        fits = _fit_calibrations(dataset, method)
    assembly = _assemble(dataset, fits, method, design)
    return _estimate_from_assembly(assembly, fits, method, design)


def estimate_all(
    dataset: PooledDataset,
    methods: tuple[PoolingMethod, ...] = AGGREGATED_METHODS,
    design: DesignSpec | None = None,
) -> dict[PoolingMethod, AggregatedEstimate]:
    """Run several aggregated methods on one dataset, validating once."""
    design = design or dataset.design
    _check_ready(dataset)
    out = {}
    flats = [flatten_study(s) for s in dataset.studies]
    fits_all = {
        s.study_id: fit_study_calibration(s)
        for s in dataset.studies
        if s.lab_kind is LabKind.LOCAL
    }
    for method in methods:
        if method not in AGGREGATED_METHODS:
            raise ValueError(f"method {method} is not an aggregated method")
        fits = {} if method is PoolingMethod.NAIVE else fits_all
        exposures = [_materialize(f, fits.get(f.study_id), method) for f in flats]
        assembly = build_assembly(flats, exposures, design)
        out[method] = _estimate_from_assembly(assembly, fits, method, design)
    return out


def _estimate_from_assembly(assembly: Assembly, fits: dict[str, CalibrationFit],
                            method: PoolingMethod, design: DesignSpec) -> AggregatedEstimate:
    cfit = clogit.fit(assembly.problem)
    if not cfit.converged:
        raise EstimationError(
            f"pooled conditional-logistic fit did not converge: {cfit.message}"
        )
    model_cov = np.linalg.inv(cfit.info)
    if assembly.n_slots == 0:
        sandwich = model_cov
    else:
        system = build_stacked_system(assembly, fits, cfit)
        sandwich = _beta_block(system, assembly.problem.p)
    return AggregatedEstimate(
        method=method,
        names=design.coefficient_names(),
        beta=cfit.beta,
        sandwich_cov=sandwich,
        model_cov=model_cov,
        calibration_fits=dict(fits),
        fit_meta=cfit,
    )


def build_stacked_system(assembly: Assembly, fits: dict[str, CalibrationFit],
                         cfit: ClogitFit) -> StackedSystem:
    """A and B matrices over stratum units for the stacked equations."""
    problem = assembly.problem
    p = problem.p
    q_n = assembly.n_slots
    dim = 2 * q_n + p
    beta = cfit.beta

    theta = np.concatenate([
        [fits[sid].a_hat for sid in assembly.slot_study_ids],
        [fits[sid].b_hat for sid in assembly.slot_study_ids],
        beta,
    ])

    psi = np.zeros((problem.n_strata, dim))
    psi[:, : 2 * q_n] = assembly.psi_cal
    psi[:, 2 * q_n:] = clogit.stratum_scores(problem, beta)

    b_matrix = psi.T @ psi
    info = clogit.information(problem, beta)
    b_matrix[2 * q_n:, 2 * q_n:] = info

    a_matrix = np.zeros((dim, dim))
    for q, sid in enumerate(assembly.slot_study_ids):
        det = assembly.cal_n[q] * assembly.cal_sum_w2[q] - assembly.cal_sum_w[q] ** 2
        if not det > 0:
            raise SingularDesignError(
                f"calibration design for study {sid!r} is singular "
                "(too few or constant calibration measurements)"
            )
        a_matrix[q, q] = assembly.cal_n[q]
        a_matrix[q, q_n + q] = a_matrix[q_n + q, q] = assembly.cal_sum_w[q]
        a_matrix[q_n + q, q_n + q] = assembly.cal_sum_w2[q]
    a_matrix[2 * q_n:, 2 * q_n:] = info

    probs = clogit.control_probabilities(problem, beta)
    seg = problem.stratum_index
    starts = problem.offsets[:-1]
    rows = problem.rows
    x_col = 0
    xv_col = 2 if assembly.design.include_interaction else None
    beta_x = beta[x_col]
    beta_xv = beta[xv_col] if xv_col is not None else 0.0

    for q in range(q_n):
        in_study = assembly.row_slot == q
        for which in ("a", "b"):
            if which == "a":
                dd_x = np.where(in_study, assembly.cal_c - assembly.cal_m, 0.0)
                dd_xv = (assembly.cal_c * assembly.v_c - assembly.cal_m * assembly.v_m)
            else:
                dd_x = np.where(
                    in_study,
                    assembly.cal_c * assembly.w_c - assembly.cal_m * assembly.w_m,
                    0.0,
                )
                dd_xv = (assembly.cal_c * assembly.w_c * assembly.v_c
                         - assembly.cal_m * assembly.w_m * assembly.v_m)
            col = np.zeros(p)
            g = beta_x * dd_x
            col[x_col] = float(probs @ dd_x)
            if xv_col is not None:
                dd_xv = np.where(in_study, dd_xv, 0.0)
                g = g + beta_xv * dd_xv
                col[xv_col] = float(probs @ dd_xv)
            g_bar = np.add.reduceat(probs * g, starts)
            col += rows.T @ (probs * (g - g_bar[seg]))
            a_matrix[2 * q_n:, q if which == "a" else q_n + q] = col

    return StackedSystem(theta=theta, psi=psi, a_matrix=a_matrix,
                         b_matrix=b_matrix, n_slots=q_n)


def _beta_block(system: StackedSystem, p: int) -> np.ndarray:
    try:
        a_inv = np.linalg.inv(system.a_matrix)
    except np.linalg.LinAlgError:
        raise SingularDesignError("stacked system Jacobian is singular") from None
    full = a_inv @ system.b_matrix @ a_inv.T
    block = full[-p:, -p:]
    return 0.5 * (block + block.T)


def stacked_sandwich(
    dataset: PooledDataset,
    calibration_fits: dict[str, CalibrationFit],
    clogit_fit: ClogitFit,
    method: PoolingMethod,
    design: DesignSpec | None = None,
) -> np.ndarray:
    """Coefficient block of the stacked-sandwich covariance.

    Rebuilds the assembly for ``method`` from the dataset and supplied
    calibration fits; ``clogit_fit`` must be the converged pooled fit on the
    matching problem.
    """
    if not clogit_fit.converged:
        raise EstimationError("sandwich requires a converged pooled fit")
    design = design or dataset.design
    assembly = _assemble(dataset, calibration_fits, method, design)
    if assembly.n_slots == 0:
        return np.linalg.inv(clogit_fit.info)
    system = build_stacked_system(assembly, calibration_fits, clogit_fit)
    return _beta_block(system, assembly.problem.p)
