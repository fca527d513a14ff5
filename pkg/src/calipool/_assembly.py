"""Internal flat-array views of datasets and pooled design-matrix assembly.

Estimation touches every subject many times, so datasets are converted once
into contiguous numpy arrays.  The conditional-likelihood rows built here are
control-minus-case differences; when both ends of a difference are calibrated
predictions from the same study line, the exposure difference is formed as
slope * (w_control - w_case), which is algebraically identical to differencing
the fitted values but keeps the result exactly independent of the intercept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationFit
from .clogit import ClogitProblem
from .data import DesignSpec, LabKind, Study


@dataclass(frozen=True)
class FlatStudy:
    """One study's subjects as parallel arrays, strata contiguous."""

    study_id: str
    local: bool
    starts: np.ndarray       # (n_strata + 1,) member offsets
    case_member: np.ndarray  # (n_strata,) member index of each stratum's case
    is_case: np.ndarray      # (n_members,) bool
    w: np.ndarray            # (n_members,) local measurement, nan if absent
    x: np.ndarray            # (n_members,) reference measurement, nan if absent
    v: np.ndarray            # (n_members,) effect modifier, nan if absent
    z: np.ndarray            # (n_members, n_z) covariates
    in_cal: np.ndarray       # (n_members,) bool
    stratum_of: np.ndarray   # (n_members,) stratum index within the study

    @property
    def n_strata(self) -> int:
        return len(self.starts) - 1

    @property
    def n_members(self) -> int:
        return len(self.is_case)


def flatten_study(study: Study) -> FlatStudy:
    nan = float("nan")
    starts = [0]
    case_member = []
    is_case, w, x, v, in_cal, z = [], [], [], [], [], []
    stratum_of = []
    for j, stratum in enumerate(study.strata):
        case_idx = None
        for m in stratum.members:
            if m.is_case and case_idx is None:
                case_idx = len(is_case)
            is_case.append(m.is_case)
            w.append(nan if m.local_w is None else m.local_w)
            x.append(nan if m.ref_x is None else m.ref_x)
            v.append(nan if m.effect_modifier is None else m.effect_modifier)
            z.append(m.covariates)
            in_cal.append(m.in_calibration_subset)
            stratum_of.append(j)
        if case_idx is None:
            raise ValueError(f"stratum {stratum.stratum_id!r} has no case")
        case_member.append(case_idx)
        starts.append(len(is_case))
    n_z = len(z[0]) if z else 0
    return FlatStudy(
        study_id=study.study_id,
        local=study.lab_kind is LabKind.LOCAL,
        starts=np.asarray(starts, dtype=np.intp),
        case_member=np.asarray(case_member, dtype=np.intp),
        is_case=np.asarray(is_case, dtype=bool),
        w=np.asarray(w, dtype=float),
        x=np.asarray(x, dtype=float),
        v=np.asarray(v, dtype=float),
        z=np.asarray(z, dtype=float).reshape(len(is_case), n_z),
        in_cal=np.asarray(in_cal, dtype=bool),
        stratum_of=np.asarray(stratum_of, dtype=np.intp),
    )


@dataclass(frozen=True)
class StudyExposures:
    """Materialized analysis exposures for one study."""

    x_tilde: np.ndarray      # per member
    calibrated: np.ndarray   # bool per member: value came off the fitted line
    fit: CalibrationFit | None  # the line used, if any


@dataclass(frozen=True)
class Assembly:
    """Pooled difference rows plus everything the sandwich needs."""

    problem: ClogitProblem
    design: DesignSpec
    # per control row
    row_slot: np.ndarray     # calibration slot of the row's study, -1 if none
    cal_c: np.ndarray        # control exposure is a fitted value (float 0/1)
    cal_m: np.ndarray        # case exposure is a fitted value (float 0/1)
    w_c: np.ndarray
    w_m: np.ndarray
    v_c: np.ndarray          # zeros when the design has no interaction
    v_m: np.ndarray
    # per stratum (pooled order)
    stratum_slot: np.ndarray
    psi_cal: np.ndarray      # (n_strata, 2Q) OLS residual contributions
    # per calibration slot
    slot_study_ids: tuple[str, ...]
    cal_n: np.ndarray        # (Q,)
    cal_sum_w: np.ndarray
    cal_sum_w2: np.ndarray

    @property
    def n_slots(self) -> int:
        return len(self.slot_study_ids)


def build_assembly(
    flats: list[FlatStudy],
    exposures: list[StudyExposures],
    design: DesignSpec,
) -> Assembly:
    """Stack per-study difference rows into one problem with sandwich metadata.

    ``flats`` and ``exposures`` are aligned; studies whose exposures carry a
    calibration fit get a parameter slot in the stacked system.
    """
    interaction = design.include_interaction
    slot_ids = [f.study_id for f, e in zip(flats, exposures) if e.fit is not None]
    slot_of_study = {sid: q for q, sid in enumerate(slot_ids)}
    n_slots = len(slot_ids)

    blocks = []
    row_slot, cal_c, cal_m, w_c, w_m, v_c, v_m = [], [], [], [], [], [], []
    stratum_slot = []
    psi_cal_rows = []
    cal_n = np.zeros(n_slots)
    cal_sum_w = np.zeros(n_slots)
    cal_sum_w2 = np.zeros(n_slots)

    for flat, exp in zip(flats, exposures):
        xt, calibrated, fit = exp.x_tilde, exp.calibrated.astype(float), exp.fit
        slot = slot_of_study.get(flat.study_id, -1)
        case_of_member = flat.case_member[flat.stratum_of]
        ctrl = ~flat.is_case
        ci = np.nonzero(ctrl)[0]                  # control member indices
        mi = case_of_member[ci]                   # matching case member indices

        both_cal = (calibrated[ci] > 0) & (calibrated[mi] > 0)
        if fit is not None:
            xdiff = np.where(both_cal, fit.b_hat * (flat.w[ci] - flat.w[mi]),
                             xt[ci] - xt[mi])
        else:
            xdiff = xt[ci] - xt[mi]
        cols = [xdiff]
        if interaction:
            cols.append(flat.v[ci] - flat.v[mi])
            cols.append(xt[ci] * flat.v[ci] - xt[mi] * flat.v[mi])
        if flat.z.shape[1]:
            cols.append(flat.z[ci] - flat.z[mi])
        rows = np.column_stack(cols)

        sizes = np.diff(flat.starts) - 1          # controls per stratum
        if np.any(sizes < 1):
            raise ValueError(f"study {flat.study_id!r} has strata without controls")
        blocks.append((rows, sizes))

        row_slot.append(np.full(len(ci), slot, dtype=np.intp))
        cal_c.append(calibrated[ci])
        cal_m.append(calibrated[mi])
        w_c.append(np.nan_to_num(flat.w[ci]))
        w_m.append(np.nan_to_num(flat.w[mi]))
        if interaction:
            v_c.append(flat.v[ci])
            v_m.append(flat.v[mi])

        stratum_slot.append(np.full(flat.n_strata, slot, dtype=np.intp))
        psi = np.zeros((flat.n_strata, 2 * n_slots))
        if fit is not None and slot >= 0:
            members = np.nonzero(flat.in_cal)[0]
            wk = flat.w[members]
            resid = flat.x[members] - fit.a_hat - fit.b_hat * wk
            np.add.at(psi[:, slot], flat.stratum_of[members], resid)
            np.add.at(psi[:, n_slots + slot], flat.stratum_of[members], resid * wk)
            cal_n[slot] = len(members)
            cal_sum_w[slot] = wk.sum()
            cal_sum_w2[slot] = float(wk @ wk)
        psi_cal_rows.append(psi)

    all_rows = np.vstack([b[0] for b in blocks])
    all_sizes = np.concatenate([b[1] for b in blocks])
    offsets = np.zeros(len(all_sizes) + 1, dtype=np.intp)
    np.cumsum(all_sizes, out=offsets[1:])
    problem = ClogitProblem(rows=all_rows, offsets=offsets)

    zeros = np.zeros(len(all_rows))
    return Assembly(
        problem=problem,
        design=design,
        row_slot=np.concatenate(row_slot),
        cal_c=np.concatenate(cal_c),
        cal_m=np.concatenate(cal_m),
        w_c=np.concatenate(w_c),
        w_m=np.concatenate(w_m),
        v_c=np.concatenate(v_c) if interaction else zeros,
        v_m=np.concatenate(v_m) if interaction else zeros,
        stratum_slot=np.concatenate(stratum_slot),
        psi_cal=np.vstack(psi_cal_rows),
        slot_study_ids=tuple(slot_ids),
        cal_n=cal_n,
        cal_sum_w=cal_sum_w,
        cal_sum_w2=cal_sum_w2,
    )
