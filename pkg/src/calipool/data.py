"""Core domain types for pooled matched case-control biomarker data.

A dataset is a collection of studies; each study is a collection of matched
strata (one case plus one or more controls); each subject carries a local-lab
biomarker value, an optional reference-lab value, an optional effect modifier,
and already-encoded numeric covariates.  All types are immutable after
construction, so they can be shared freely across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DataError, MissingExposureError


class LabKind(Enum):
    """Where a study's biomarker assays were run."""

    REFERENCE = "reference"
    LOCAL = "local"


@dataclass(frozen=True, slots=True)
class Subject:
    """One study participant.

    ``local_w`` and ``ref_x`` are the local-laboratory and reference-laboratory
    biomarker measurements; at least one must be present.  Calibration-subset
    members are controls that were re-assayed at the reference lab, so they
    carry both measurements.
    """

    subject_id: str
    is_case: bool
    local_w: float | None = None
    ref_x: float | None = None
    effect_modifier: float | None = None
    covariates: tuple[float, ...] = ()
    in_calibration_subset: bool = False


@dataclass(frozen=True, slots=True)
class Stratum:
    """A matched set: exactly one case and its matched controls."""

    stratum_id: str
    members: tuple[Subject, ...]

    @property
    def case(self) -> Subject:
        cases = [m for m in self.members if m.is_case]
        if len(cases) != 1:
            raise DataError(
                f"stratum {self.stratum_id!r} has {len(cases)} cases; expected exactly 1"
            )
        return cases[0]

    @property
    def controls(self) -> tuple[Subject, ...]:
        return tuple(m for m in self.members if not m.is_case)


@dataclass(frozen=True, slots=True)
class Study:
    """Strata plus laboratory provenance and the calibration subset."""

    study_id: str
    lab_kind: LabKind
    strata: tuple[Stratum, ...]

    def subjects(self) -> Iterator[Subject]:
        for stratum in self.strata:
            yield from stratum.members

    def calibration_subjects(self) -> tuple[Subject, ...]:
        return tuple(s for s in self.subjects() if s.in_calibration_subset)

    def calibration_pairs(self) -> list[tuple[float, float]]:
        """(local_w, ref_x) pairs for the calibration subset."""
        pairs = []
        for s in self.calibration_subjects():
            if s.local_w is None or s.ref_x is None:
                raise MissingExposureError(
                    f"calibration subject {s.subject_id!r} lacks a paired measurement"
                )
            pairs.append((s.local_w, s.ref_x))
        return pairs


@dataclass(frozen=True, slots=True)
class DesignSpec:
    """Model layout: interaction on/off, covariate labels, reporting scale.

    ``exposure_scale`` is the exposure increment used when reporting relative
    risks (e.g. 20.0 to report per 20 nmol/L); estimation itself is always on
    the raw scale.
    """

    include_interaction: bool = False
    covariate_names: tuple[str, ...] = ()
    exposure_scale: float = 1.0

    def coefficient_names(self) -> tuple[str, ...]:
        names: tuple[str, ...] = ("x",)
        if self.include_interaction:
            names += ("v", "xv")
        return names + self.covariate_names


@dataclass(frozen=True, slots=True)
class PooledDataset:
    """All studies contributing to one pooled analysis."""

    studies: tuple[Study, ...]
    design: DesignSpec = field(default_factory=DesignSpec)

    def study(self, study_id: str) -> Study:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise KeyError(study_id)


@dataclass(frozen=True, slots=True)
class ValidationIssue:
    """One invariant violation found by :func:`validate`."""

    rule: str
    study_id: str | None = None
    stratum_id: str | None = None
    subject_id: str | None = None

    def __str__(self) -> str:
        where = "/".join(p for p in (self.study_id, self.stratum_id, self.subject_id) if p)
        return f"{self.rule} [{where}]" if where else self.rule


def validate(dataset: PooledDataset) -> list[ValidationIssue]:
    """Check every structural invariant; an empty report means estimation-ready.

    Violations are returned as data rather than raised: callers decide whether
    a flawed dataset is fatal.  The function is pure and idempotent.
    """
    issues: list[ValidationIssue] = []
    seen_study_ids: set[str] = set()
    covariate_dim: int | None = None
    modifier_present: bool | None = None

    for study in dataset.studies:
        sid = study.study_id
        if sid in seen_study_ids:
            issues.append(ValidationIssue("duplicate study id", study_id=sid))
        seen_study_ids.add(sid)

        n_cal = 0
        for stratum in study.strata:
            n_cases = sum(1 for m in stratum.members if m.is_case)
            n_controls = len(stratum.members) - n_cases
            if n_cases > 1:
                issues.append(
                    ValidationIssue("multiple cases in stratum", sid, stratum.stratum_id)
                )
            elif n_cases == 0:
                issues.append(ValidationIssue("no case in stratum", sid, stratum.stratum_id))
            if n_controls == 0:
                issues.append(ValidationIssue("no controls in stratum", sid, stratum.stratum_id))

            for m in stratum.members:
                if m.local_w is None and m.ref_x is None:
                    issues.append(
                        ValidationIssue("no exposure measurement", sid, stratum.stratum_id,
                                        m.subject_id)
                    )
                if m.in_calibration_subset:
                    n_cal += 1
                    if m.is_case:
                        issues.append(
                            ValidationIssue("case in calibration subset", sid,
                                            stratum.stratum_id, m.subject_id)
                        )
                    if m.local_w is None or m.ref_x is None:
                        issues.append(
                            ValidationIssue("calibration subject missing paired measurement",
                                            sid, stratum.stratum_id, m.subject_id)
                        )
                if covariate_dim is None:
                    covariate_dim = len(m.covariates)
                elif len(m.covariates) != covariate_dim:
                    issues.append(
                        ValidationIssue("covariate length mismatch", sid,
                                        stratum.stratum_id, m.subject_id)
                    )
                has_modifier = m.effect_modifier is not None
                if modifier_present is None:
                    modifier_present = has_modifier
                elif has_modifier != modifier_present:
                    issues.append(
                        ValidationIssue("effect modifier presence inconsistent", sid,
                                        stratum.stratum_id, m.subject_id)
                    )
                if study.lab_kind is LabKind.REFERENCE and m.ref_x is None:
                    issues.append(
                        ValidationIssue("reference study member missing ref_x", sid,
                                        stratum.stratum_id, m.subject_id)
                    )
                if study.lab_kind is LabKind.LOCAL and m.local_w is None:
                    issues.append(
                        ValidationIssue("local study member missing local_w", sid,
                                        stratum.stratum_id, m.subject_id)
                    )

        if study.lab_kind is LabKind.REFERENCE and n_cal > 0:
            issues.append(ValidationIssue("reference study has calibration subset", sid))
        if study.lab_kind is LabKind.LOCAL and n_cal == 0:
            issues.append(ValidationIssue("local study has empty calibration subset", sid))

    if dataset.design.include_interaction and modifier_present is False:
        issues.append(ValidationIssue("interaction design requires effect modifier"))

    if any(len(s.covariates) != len(dataset.design.covariate_names)
           for st in dataset.studies for sr in st.strata for s in sr.members):
        issues.append(ValidationIssue("covariate dimension differs from design"))

    return issues


def stratum_differences(
    stratum: Stratum,
    exposure: Callable[[Subject], float | None],
    include_interaction: bool | None = None,
) -> np.ndarray:
    """Control-minus-case difference rows for one matched set.

    Builds one row per control with columns (exposure difference, modifier
    difference, exposure*modifier product difference, covariate differences);
    the modifier and interaction columns appear only when the interaction is
    in the model.  The product is formed per subject *before* differencing.

    Parameters
    ----------
    stratum : Stratum
        A valid matched set (exactly one case).
    exposure : callable
        Maps a subject to its exposure value on the analysis scale.
    include_interaction : bool, optional
        Defaults to True when every member carries an effect modifier.

    Returns
    -------
    ndarray of shape (n_controls, p)
    """
    case = stratum.case
    controls = stratum.controls
    if include_interaction is None:
        include_interaction = all(m.effect_modifier is not None for m in stratum.members)

    def value(subject: Subject) -> float:
        x = exposure(subject)
        if x is None:
            raise MissingExposureError(
                f"no exposure value for subject {subject.subject_id!r}"
            )
        return float(x)

    x_case = value(case)
    rows = []
    for ctl in controls:
        x_ctl = value(ctl)
        row = [x_ctl - x_case]
        if include_interaction:
            if ctl.effect_modifier is None or case.effect_modifier is None:
                raise MissingExposureError(
                    f"effect modifier missing in stratum {stratum.stratum_id!r}"
                )
            row.append(ctl.effect_modifier - case.effect_modifier)
            row.append(x_ctl * ctl.effect_modifier - x_case * case.effect_modifier)
        row.extend(zc - zm for zc, zm in zip(ctl.covariates, case.covariates))
        rows.append(row)
    return np.asarray(rows, dtype=float)


def drop_empty_strata(strata: Sequence[Stratum], study_id: str) -> tuple[Stratum, ...]:
    """Remove strata with no controls, warning once per study.

    Such strata contribute a constant to the conditional likelihood and no
    information about the coefficients.
    """
    kept = tuple(s for s in strata if len(s.controls) > 0)
    if len(kept) < len(strata):
        warnings.warn(
            f"study {study_id!r}: dropped {len(strata) - len(kept)} strata without controls",
            stacklevel=2,
        )
    return kept
