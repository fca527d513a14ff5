import numpy as np
import pytest

from calipool.calibration import (
    ExposureSource,
    apply_full_calibration,
    apply_internalized,
    exposure_lookup,
    fit_calibration,
    fit_study_calibration,
    reference_passthrough,
)
from calipool.data import LabKind, Stratum, Study, Subject
from calipool.errors import (
    DataError,
    DegenerateCalibrationError,
    InsufficientDataError,
    SingularDesignError,
)


def ols_oracle(pairs):
    """Normal-equations solve, independent of the fitted implementation."""
    arr = np.asarray(pairs, dtype=float)
    w, x = arr[:, 0], arr[:, 1]
    M = np.column_stack([np.ones_like(w), w])
    coef = np.linalg.solve(M.T @ M, M.T @ x)
    return coef[0], coef[1]


class TestFitCalibration:
    def test_exact_line(self):
        fit = fit_calibration([(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)])
        assert fit.a_hat == pytest.approx(1.0, abs=1e-12)
        assert fit.b_hat == pytest.approx(1.0, abs=1e-12)
        assert fit.resid_var == pytest.approx(0.0, abs=1e-24)
        assert fit.n_cal == 3

    def test_closed_form_slope(self):
        # slope = sum((w-wbar)(x-xbar)) / sum((w-wbar)^2) = 3/2, intercept 5/6
        fit = fit_calibration([(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)])
        assert fit.b_hat == pytest.approx(1.5, abs=1e-12)
        assert fit.a_hat == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_degenerate_w(self):
        with pytest.raises(SingularDesignError):
            fit_calibration([(1.0, 0.0), (1.0, 1.0), (1.0, 2.0)])

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientDataError):
            fit_calibration([(0.0, 1.0), (1.0, 2.0)])

    def test_near_zero_slope_rejected(self):
        with pytest.raises(DegenerateCalibrationError):
            fit_calibration([(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)])

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, b = rng.normal(size=2)
            if abs(b) < 0.05:
                continue
            w = rng.normal(size=10)
            pairs = [(wi, a + b * wi) for wi in w]
            fit = fit_calibration(pairs)
            assert fit.a_hat == pytest.approx(a, abs=1e-10)
            assert fit.b_hat == pytest.approx(b, abs=1e-10)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = rng.integers(3, 12)
            w = rng.normal(size=n) * rng.uniform(0.5, 3.0)
            x = rng.normal(size=n) + 2.0 * w
            pairs = list(zip(w, x))
            try:
                fit = fit_calibration(pairs)
            except DegenerateCalibrationError:
                continue
            a, b = ols_oracle(pairs)
            assert fit.a_hat == pytest.approx(a, rel=1e-9, abs=1e-9)
            assert fit.b_hat == pytest.approx(b, rel=1e-9, abs=1e-9)

    def test_covariance_matches_textbook_form(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=30)
        x = 1.0 + 0.8 * w + rng.normal(size=30) * 0.3
        fit = fit_calibration(list(zip(w, x)))
        M = np.column_stack([np.ones_like(w), w])
        resid = x - M @ [fit.a_hat, fit.b_hat]
        rv = resid @ resid / (len(w) - 2)
        expected = rv * np.linalg.inv(M.T @ M)
        np.testing.assert_allclose(fit.cov, expected, rtol=1e-9)
        eigs = np.linalg.eigvalsh(fit.cov)
        assert eigs.min() >= -1e-15


def make_local_study(subjects):
    strata = []
    it = iter(subjects)
    for case, ctl in zip(it, it):
        strata.append(Stratum(f"s{len(strata)}", (case, ctl)))
    return Study("loc", LabKind.LOCAL, tuple(strata))


@pytest.fixture
def toy_study():
    subjects = [
        Subject("case0", True, local_w=10.0),
        Subject("ctl0", False, local_w=10.0, ref_x=6.9, in_calibration_subset=True),
        Subject("case1", True, local_w=4.0),
        Subject("ctl1", False, local_w=2.0),
    ]
    return make_local_study(subjects)


class TestApply:
    def test_full_calibration_ignores_ref(self, toy_study):
        fit = fit_calibration([(0.0, 2.0), (1.0, 2.5), (2.0, 3.0)])  # a=2, b=0.5
        out = apply_full_calibration(toy_study, fit)
        by_id = {c.subject_id: c for c in out}
        assert by_id["ctl0"].x_tilde == pytest.approx(7.0)
        assert by_id["ctl0"].source is ExposureSource.CALIBRATED
        assert all(c.source is ExposureSource.CALIBRATED for c in out)

    def test_internalized_prefers_ref(self, toy_study):
        fit = fit_calibration([(0.0, 2.0), (1.0, 2.5), (2.0, 3.0)])
        out = apply_internalized(toy_study, fit)
        by_id = {c.subject_id: c for c in out}
        assert by_id["ctl0"].x_tilde == pytest.approx(6.9)
        assert by_id["ctl0"].source is ExposureSource.REFERENCE
        assert by_id["case0"].x_tilde == pytest.approx(7.0)
        assert by_id["case0"].source is ExposureSource.CALIBRATED

    def test_identity_calibration(self, toy_study):
        fit = fit_calibration([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])  # a=0, b=1
        out = apply_full_calibration(toy_study, fit)
        for c, s in zip(out, toy_study.subjects()):
            assert c.x_tilde == pytest.approx(s.local_w)

    def test_reference_study_rejected(self, toy_study):
        fit = fit_calibration([(0.0, 2.0), (1.0, 2.5), (2.0, 3.0)])
        ref = Study("ref", LabKind.REFERENCE, toy_study.strata)
        with pytest.raises(DataError):
            apply_internalized(ref, fit)
        with pytest.raises(DataError):
            apply_full_calibration(ref, fit)

    def test_passthrough_and_lookup(self):
        st = Stratum("s", (Subject("a", True, ref_x=1.5), Subject("b", False, ref_x=0.5)))
        study = Study("ref", LabKind.REFERENCE, (st,))
        out = reference_passthrough(study)
        accessor = exposure_lookup(out)
        assert accessor(st.members[0]) == 1.5
        assert all(c.source is ExposureSource.REFERENCE for c in out)


def test_fit_study_calibration_uses_subset_only(toy_study):
    study = Study(
        "loc",
        LabKind.LOCAL,
        toy_study.strata
        + (
            Stratum(
                "extra",
                (
                    Subject("case9", True, local_w=1.0),
                    Subject("ctl9", False, local_w=0.0, ref_x=2.0, in_calibration_subset=True),
                    Subject("ctl10", False, local_w=4.0, ref_x=4.0, in_calibration_subset=True),
                ),
            ),
        ),
    )
    fit = fit_study_calibration(study)
    assert fit.n_cal == 3
    assert fit.study_id == "loc"
