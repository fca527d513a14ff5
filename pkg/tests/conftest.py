import numpy as np
import pytest

from calipool.data import DesignSpec, LabKind, PooledDataset, Stratum, Study, Subject


def softmax_case_study(
    rng,
    study_id="s1",
    n_strata=80,
    a=1.0,
    b=0.8,
    sigma_e=0.3,
    n_cal=25,
    beta_x=0.4,
    interaction=False,
    beta_v=0.0,
    beta_xv=0.0,
    reference=False,
    controls_per_stratum=1,
):
    """Small study generated directly from the conditional model.

    Members of each stratum are drawn iid, then the case is picked with
    probability proportional to exp(linear predictor), which is exactly the
    matched-set conditional likelihood, so the fitted coefficients estimate
    the generating ones.
    """
    m = controls_per_stratum + 1
    strata = []
    cal_strata = set(rng.choice(n_strata, size=min(n_cal, n_strata), replace=False))
    for j in range(n_strata):
        w = rng.normal(0.0, 1.0, size=m)
        x = a + b * w + rng.normal(0.0, sigma_e, size=m)
        v = rng.normal(0.0, 1.0, size=m) if interaction else [None] * m
        lin = beta_x * x
        if interaction:
            lin = lin + beta_v * np.asarray(v) + beta_xv * x * np.asarray(v)
        pr = np.exp(lin - lin.max())
        case_idx = rng.choice(m, p=pr / pr.sum())
        members = []
        control_seen = False
        for i in range(m):
            is_case = i == case_idx
            in_cal = (
                not reference
                and not is_case
                and not control_seen
                and j in cal_strata
            )
            if not is_case:
                control_seen = True
            members.append(
                Subject(
                    subject_id=f"{study_id}-{j}-{i}",
                    is_case=is_case,
                    local_w=None if reference else float(w[i]),
                    ref_x=float(x[i]) if (reference or in_cal) else None,
                    effect_modifier=float(v[i]) if interaction else None,
                    in_calibration_subset=in_cal,
                )
            )
        strata.append(Stratum(f"{study_id}-st{j}", tuple(members)))
    kind = LabKind.REFERENCE if reference else LabKind.LOCAL
    return Study(study_id, kind, tuple(strata))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pooled(studies, interaction=False):
    return PooledDataset(
        studies=tuple(studies),
        design=DesignSpec(include_interaction=interaction),
    )
