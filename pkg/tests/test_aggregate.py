import dataclasses

import numpy as np
import pytest

from calipool import clogit
from calipool._assembly import build_assembly, flatten_study
from calipool.aggregate import (
    build_stacked_system,
    estimate,
    estimate_all,
    stacked_sandwich,
)
from calipool.calibration import (
    apply_full_calibration,
    apply_internalized,
    exposure_lookup,
    fit_study_calibration,
)
from calipool.data import (
    DesignSpec,
    LabKind,
    PooledDataset,
    Stratum,
    Study,
    Subject,
    stratum_differences,
)
from calipool.errors import DataError
from calipool.methods import AGGREGATED_METHODS, PoolingMethod
from conftest import pooled, softmax_case_study


def exact_line_study(study_id="lin", n_strata=40, a=1.0, b=1.0, seed=5):
    """Local study whose reference values sit exactly on an integer-arithmetic line."""
    rng = np.random.default_rng(seed)
    strata = []
    for j in range(n_strata):
        w = rng.integers(-3, 4, size=2).astype(float)
        x = a + b * w
        case_idx = int(rng.integers(0, 2))
        members = []
        for i in range(2):
            in_cal = (i != case_idx) and (j % 2 == 0)
            members.append(
                Subject(
                    subject_id=f"{study_id}-{j}-{i}",
                    is_case=i == case_idx,
                    local_w=w[i],
                    ref_x=x[i] if in_cal else None,
                    in_calibration_subset=in_cal,
                )
            )
        strata.append(Stratum(f"{study_id}-st{j}", tuple(members)))
    return Study(study_id, LabKind.LOCAL, tuple(strata))


class TestEstimateBasics:
    def test_reference_only_reduces_to_plain_clogit(self, rng):
        study = softmax_case_study(rng, "ref1", reference=True, n_strata=60)
        ds = pooled([study])
        est = estimate(ds, PoolingMethod.FULL_CALIBRATION)
        # direct fit on the same difference rows
        blocks = [stratum_differences(s, lambda m: m.ref_x) for s in study.strata]
        direct = clogit.fit(clogit.ClogitProblem.from_blocks(blocks))
        np.testing.assert_allclose(est.beta, direct.beta, atol=1e-12)
        np.testing.assert_array_equal(est.sandwich_cov, est.model_cov)
        assert est.calibration_fits == {}

    def test_validation_failure_raises(self, rng):
        study = softmax_case_study(rng, "bad", n_cal=0)
        with pytest.raises(DataError, match="empty calibration subset"):
            estimate(pooled([study]), PoolingMethod.NAIVE)

    def test_exact_calibration_recovers_truth_fit(self):
        study = exact_line_study(a=0.5, b=2.0)
        ds = pooled([study])
        est = estimate(ds, PoolingMethod.FULL_CALIBRATION)
        # true x is a + b*w for everyone, so fitting on w*b + a must agree
        blocks = [
            stratum_differences(s, lambda m: 0.5 + 2.0 * m.local_w)
            for s in study.strata
        ]
        direct = clogit.fit(clogit.ClogitProblem.from_blocks(blocks))
        np.testing.assert_allclose(est.beta, direct.beta, atol=1e-10)
        fit = est.calibration_fits["lin"]
        assert fit.resid_var == pytest.approx(0.0, abs=1e-20)

    def test_internalized_equals_full_on_exact_line(self):
        study = exact_line_study(a=1.0, b=1.0)
        ds = pooled([study])
        res = estimate_all(ds, AGGREGATED_METHODS)
        np.testing.assert_array_equal(
            res[PoolingMethod.INTERNALIZED].beta,
            res[PoolingMethod.FULL_CALIBRATION].beta,
        )

    def test_full_calibration_beta_bit_invariant_to_intercept(self, rng):
        study = softmax_case_study(rng, "loc1", n_strata=100, n_cal=30)
        ds = pooled([study])
        fit = fit_study_calibration(study)
        base = estimate(ds, PoolingMethod.FULL_CALIBRATION, calibration_fits={"loc1": fit})
        shifted_fit = dataclasses.replace(fit, a_hat=fit.a_hat + 100.0)
        shifted = estimate(
            ds, PoolingMethod.FULL_CALIBRATION, calibration_fits={"loc1": shifted_fit}
        )
        assert np.array_equal(base.beta, shifted.beta)

    def test_identity_calibration_collapse(self, rng):
        # single local study whose fitted line is exactly the identity
        study = exact_line_study(a=0.0, b=1.0)
        ds = pooled([study])
        res = estimate_all(ds, AGGREGATED_METHODS)
        fit = res[PoolingMethod.FULL_CALIBRATION].calibration_fits["lin"]
        assert fit.a_hat == 0.0 and fit.b_hat == 1.0
        naive = res[PoolingMethod.NAIVE].beta
        np.testing.assert_array_equal(res[PoolingMethod.INTERNALIZED].beta, naive)
        np.testing.assert_array_equal(res[PoolingMethod.FULL_CALIBRATION].beta, naive)

    def test_mixed_reference_and_local(self, rng):
        ref = softmax_case_study(rng, "ref", reference=True, n_strata=50)
        loc = softmax_case_study(rng, "loc", n_strata=50, n_cal=20)
        ds = pooled([ref, loc])
        est = estimate(ds, PoolingMethod.INTERNALIZED)
        assert est.beta.shape == (1,)
        assert set(est.calibration_fits) == {"loc"}
        assert est.fit_meta.converged

    def test_deterministic(self, rng):
        study = softmax_case_study(rng, "loc1", n_strata=60)
        ds = pooled([study])
        a = estimate(ds, PoolingMethod.FULL_CALIBRATION)
        b = estimate(ds, PoolingMethod.FULL_CALIBRATION)
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.sandwich_cov, b.sandwich_cov)


class TestRowsMatchReferenceSemantics:
    """The vectorized assembly must agree with the subject-level operations."""

    @pytest.mark.parametrize("method", [PoolingMethod.INTERNALIZED,
                                        PoolingMethod.FULL_CALIBRATION])
    def test_rows_match_apply_plus_differences(self, rng, method):
        study = softmax_case_study(rng, "loc1", n_strata=30, n_cal=12)
        fit = fit_study_calibration(study)
        if method is PoolingMethod.FULL_CALIBRATION:
            calibrated = apply_full_calibration(study, fit)
        else:
            calibrated = apply_internalized(study, fit)
        accessor = exposure_lookup(calibrated)
        expected = np.vstack(
            [stratum_differences(s, accessor, include_interaction=False)
             for s in study.strata]
        )
        ds = pooled([study])
        est = estimate(ds, method)
        from calipool.aggregate import _assemble

        assembly = _assemble(ds, est.calibration_fits, method, ds.design)
        np.testing.assert_allclose(assembly.problem.rows, expected, atol=1e-12)


class TestStackedSandwich:
    def test_cross_derivative_matches_finite_differences(self, rng):
        studies = [
            softmax_case_study(rng, "locA", n_strata=40, n_cal=15, a=-1.0, b=0.7),
            softmax_case_study(rng, "locB", n_strata=40, n_cal=15, a=2.0, b=1.3),
        ]
        ds = pooled(studies)
        method = PoolingMethod.INTERNALIZED
        est = estimate(ds, method)
        fits = est.calibration_fits
        from calipool.aggregate import _assemble

        assembly = _assemble(ds, fits, method, ds.design)
        system = build_stacked_system(assembly, fits, est.fit_meta)
        p = assembly.problem.p
        q_n = assembly.n_slots

        def total_score(perturbed_fits):
            asm = _assemble(ds, perturbed_fits, method, ds.design)
            return clogit.score(asm.problem, est.fit_meta.beta)

        for q, sid in enumerate(assembly.slot_study_ids):
            for which, col in (("a_hat", q), ("b_hat", q_n + q)):
                base = getattr(fits[sid], which)
                h = 1e-5 * max(1.0, abs(base))
                up = dict(fits)
                up[sid] = dataclasses.replace(fits[sid], **{which: base + h})
                down = dict(fits)
                down[sid] = dataclasses.replace(fits[sid], **{which: base - h})
                fd = (total_score(up) - total_score(down)) / (2 * h)
                np.testing.assert_allclose(
                    system.a_matrix[2 * q_n:, col], -fd, rtol=1e-4, atol=1e-7
                )

    def test_interaction_cross_derivatives(self, rng):
        study = softmax_case_study(
            rng, "locI", n_strata=60, n_cal=20, interaction=True,
            beta_x=0.3, beta_v=0.2, beta_xv=0.15,
        )
        ds = pooled([study], interaction=True)
        method = PoolingMethod.FULL_CALIBRATION
        est = estimate(ds, method)
        fits = est.calibration_fits
        from calipool.aggregate import _assemble

        assembly = _assemble(ds, fits, method, ds.design)
        system = build_stacked_system(assembly, fits, est.fit_meta)
        q_n = assembly.n_slots

        def total_score(perturbed_fits):
            asm = _assemble(ds, perturbed_fits, method, ds.design)
            return clogit.score(asm.problem, est.fit_meta.beta)

        sid = "locI"
        for which, col in (("a_hat", 0), ("b_hat", q_n)):
            base = getattr(fits[sid], which)
            h = 1e-5 * max(1.0, abs(base))
            up = {sid: dataclasses.replace(fits[sid], **{which: base + h})}
            down = {sid: dataclasses.replace(fits[sid], **{which: base - h})}
            fd = (total_score(up) - total_score(down)) / (2 * h)
            np.testing.assert_allclose(
                system.a_matrix[2 * q_n:, col], -fd, rtol=1e-4, atol=1e-7
            )

    def test_sandwich_psd_and_symmetric(self, rng):
        studies = [
            softmax_case_study(rng, "locA", n_strata=50, n_cal=20),
            softmax_case_study(rng, "locB", n_strata=50, n_cal=20, a=-2.0, b=1.2),
        ]
        ds = pooled(studies)
        for method in AGGREGATED_METHODS:
            est = estimate(ds, method)
            cov = est.sandwich_cov
            np.testing.assert_array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() >= -1e-12
            assert np.all(np.diag(cov) >= 0)

    def test_public_signature_matches_internal(self, rng):
        study = softmax_case_study(rng, "loc1", n_strata=40, n_cal=15)
        ds = pooled([study])
        est = estimate(ds, PoolingMethod.INTERNALIZED)
        again = stacked_sandwich(
            ds, est.calibration_fits, est.fit_meta, PoolingMethod.INTERNALIZED
        )
        np.testing.assert_allclose(again, est.sandwich_cov, atol=1e-14)

    def test_calibration_units_sum_to_zero(self, rng):
        # OLS normal equations are solved exactly, so contributions sum to zero
        study = softmax_case_study(rng, "loc1", n_strata=40, n_cal=15)
        ds = pooled([study])
        est = estimate(ds, PoolingMethod.FULL_CALIBRATION)
        from calipool.aggregate import _assemble

        assembly = _assemble(ds, est.calibration_fits, PoolingMethod.FULL_CALIBRATION,
                             ds.design)
        system = build_stacked_system(assembly, est.calibration_fits, est.fit_meta)
        np.testing.assert_allclose(system.psi.sum(axis=0), 0.0, atol=1e-8)


def test_naive_has_no_calibration_parameters(rng):
    study = softmax_case_study(rng, "loc1", n_strata=60, n_cal=20)
    ds = pooled([study])
    est = estimate(ds, PoolingMethod.NAIVE)
    np.testing.assert_array_equal(est.sandwich_cov, est.model_cov)
    assert est.calibration_fits == {}
