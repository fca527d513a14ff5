"""Synthetic demonstration dataset bundled with the package.

Three local-laboratory studies of a vitamin-D-like biomarker (nmol/L scale)
with a stroke-like binary endpoint: 49, 103, and 27 matched sets with
calibration subsets of 25, 27, and 28 controls.  The third study includes
one 1:2 matched set so its calibration subset can exceed its stratum count.
The case in each matched set is realized from the exact one-case conditional
law, so conditional-logistic fits estimate the generating coefficients.

The file shipped at ``data/demo_stroke.csv`` is the output of
:func:`make_demo_dataset` with the default seed.
"""

from __future__ import annotations

from importlib.resources import files
from pathlib import Path

import numpy as np

from .data import DesignSpec, LabKind, PooledDataset, Stratum, Study, Subject

DEMO_SEED = 20260809
DEMO_RESOURCE = "demo_stroke.csv"

COVARIATE_NAMES = (
    "followup_years",
    "smoker",
    "family_mi",
    "hypertension",
    "overweight",
    "diabetes",
)

# per-study calibration lines (intercepts in nmol/L) and design sizes
_STUDIES = (
    ("hpfs", 49, 25, 4.35, 0.94),
    ("nhs1", 103, 27, 6.50, 0.84),
    ("nhs2", 27, 28, 9.01, 0.95),
)

_BETA_X = np.log(0.95) / 20.0          # per nmol/L; RR 0.95 per 20 nmol/L
_BETA_Z = np.array([0.012, 0.35, 0.40, 0.50, 0.30, 0.60])
_MU_X, _SD_X, _SD_E = 60.0, 20.0, 5.0


def _draw_subject_block(rng, n, a, b):
    sd_w = np.sqrt(_SD_X**2 - _SD_E**2) / b
    w = (_MU_X - a) / b + sd_w * rng.standard_normal(n)
    x = a + b * w + _SD_E * rng.standard_normal(n)
    z = np.column_stack([
        np.round(rng.uniform(2.0, 12.0, n), 1),
        rng.random(n) < 0.45,
        rng.random(n) < 0.15,
        rng.random(n) < 0.30,
        rng.random(n) < 0.55,
        rng.random(n) < 0.08,
    ]).astype(float)
    return w, x, z


def make_demo_dataset(seed: int = DEMO_SEED) -> PooledDataset:
    rng = np.random.default_rng(seed)
    studies = []
    for sid, n_strata, n_cal, a, b in _STUDIES:
        strata = []
        # the last study gets one 1:2 matched set, all others are pairs
        sizes = [2] * n_strata
        if n_cal > n_strata:
            sizes[0] = 3
        cal_quota = n_cal
        for j, m in enumerate(sizes):
            w, x, z = _draw_subject_block(rng, m, a, b)
            lin = _BETA_X * x + z @ _BETA_Z
            p = np.exp(lin - lin.max())
            case_idx = rng.choice(m, p=p / p.sum())
            members = []
            for i in range(m):
                is_case = i == case_idx
                in_cal = (not is_case) and cal_quota > 0
                if in_cal:
                    cal_quota -= 1
                members.append(
                    Subject(
                        subject_id=f"{sid}-{j:03d}-{i}",
                        is_case=bool(is_case),
                        local_w=round(float(w[i]), 2),
                        ref_x=round(float(x[i]), 2) if in_cal else None,
                        covariates=tuple(z[i]),
                        in_calibration_subset=in_cal,
                    )
                )
            strata.append(Stratum(f"{sid}-{j:03d}", tuple(members)))
        studies.append(Study(sid, LabKind.LOCAL, tuple(strata)))
    design = DesignSpec(include_interaction=False, covariate_names=COVARIATE_NAMES,
                        exposure_scale=20.0)
    return PooledDataset(studies=tuple(studies), design=design)


def demo_csv_path() -> Path:
    """Location of the bundled demo CSV."""
    return Path(str(files("calipool").joinpath("data", DEMO_RESOURCE)))


def write_demo_csv(path: str | Path, seed: int = DEMO_SEED) -> None:
    from .io import write_dataset_csv

    write_dataset_csv(path, make_demo_dataset(seed))


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else str(demo_csv_path())
    write_demo_csv(target)
    print(f"wrote {target}")
