import numpy as np
import pytest
from numpy.testing import assert_allclose

from refbased import (
    Arm,
    GibbsConfig,
    InvalidParameterError,
    MvnParams,
    PatientRecord,
    RbiMethod,
    TrialDataset,
    VisitSchedule,
    analyze_ancova,
    build_imputation_distribution,
    condmean_estimator,
    condmean_jackknife,
    conditional_mean_impute,
    fit_mle,
    gibbs_sample,
    impute_multiple,
    jackknife_se,
    rubin_estimate,
    rubins_rules,
    substream,
)
from refbased.estimators import _rubin_points

from conftest import make_monotone_dataset
from oracles import ols_treatment_coef


class TestImputationDistribution:
    def test_j2r_mean_at_pattern_two(self, active_params, reference_params):
        dist = build_imputation_distribution(
            RbiMethod.J2R, active_params, reference_params, 2
        )
        assert_allclose(dist.mean, [7.92, 7.55, 7.20, 7.80, 7.78, 7.78], rtol=1e-12)

    def test_cir_mean_at_pattern_two(self, active_params, reference_params):
        # increment at visit 2 is 7.20 - 7.80 = -0.60, carried forward
        dist = build_imputation_distribution(
            RbiMethod.CIR, active_params, reference_params, 2
        )
        assert_allclose(dist.mean, [7.92, 7.55, 7.20, 7.20, 7.18, 7.18], rtol=1e-12)

    def test_identical_arms_reduce_to_own_distribution(self, active_params):
        for method in RbiMethod:
            dist = build_imputation_distribution(
                method, active_params, active_params, 2
            )
            assert_allclose(dist.mean, active_params.mean, rtol=1e-12)
            assert_allclose(dist.cov, active_params.cov, rtol=1e-9, atol=1e-12)

    def test_pre_ice_components_exact(self, active_params, reference_params):
        for method in RbiMethod:
            for pattern in range(5):
                dist = build_imputation_distribution(
                    method, active_params, reference_params, pattern
                )
                k = pattern + 1
                assert np.array_equal(dist.mean[:k], active_params.mean[:k])
                assert np.array_equal(dist.cov[:k, :k], active_params.cov[:k, :k])

    def test_cir_minus_j2r_is_constant_visit_d_gap(
        self, active_params, reference_params
    ):
        for pattern in range(5):
            j2r = build_imputation_distribution(
                RbiMethod.J2R, active_params, reference_params, pattern
            )
            cir = build_imputation_distribution(
                RbiMethod.CIR, active_params, reference_params, pattern
            )
            gap = active_params.mean[pattern] - reference_params.mean[pattern]
            diff = cir.mean - j2r.mean
            assert_allclose(diff[: pattern + 1], 0.0, atol=1e-14)
            assert_allclose(diff[pattern + 1 :], gap, rtol=1e-12)
            assert_allclose(cir.cov, j2r.cov, rtol=1e-12)

    def test_final_pattern_is_noop(self, active_params, reference_params):
        dist = build_imputation_distribution(
            RbiMethod.J2R, active_params, reference_params, 5
        )
        assert_allclose(dist.mean, active_params.mean, rtol=1e-15)

    def test_post_ice_conditional_law_is_reference(self, active_params, reference_params):
        # regression of post on pre must equal the reference-arm regression
        from refbased.estimators import _conditional_pieces

        dist = build_imputation_distribution(
            RbiMethod.J2R, active_params, reference_params, 1
        )
        reg_joint, cond_joint = _conditional_pieces(dist.cov, 2)
        reg_ref, cond_ref = _conditional_pieces(reference_params.cov, 2)
        assert_allclose(reg_joint, reg_ref, rtol=1e-9, atol=1e-12)
        assert_allclose(cond_joint, cond_ref, rtol=1e-8, atol=1e-12)


class TestImputeMultiple:
    def _draws(self, data, n_total=140, seed=2):
        cfg = GibbsConfig(n_total=n_total, n_burn=40, thin=1, seed=seed)
        return gibbs_sample(data, cfg)

    def test_completers_unchanged(self, small_dataset):
        draws = self._draws(small_dataset)
        done = impute_multiple(
            small_dataset, draws, RbiMethod.J2R, 5, substream(1, 5)
        )
        assert len(done) == 5
        for dataset in done:
            for before, after in zip(small_dataset.patients, dataset.patients):
                if before.last_observed == small_dataset.schedule.j_max:
                    assert before is after
                else:
                    assert after.last_observed == small_dataset.schedule.j_max
                    assert after.outcomes[: before.last_observed + 1] == pytest.approx(
                        before.outcomes[: before.last_observed + 1]
                    )

    def test_m_larger_than_available_draws_rejected(self, small_dataset):
        draws = self._draws(small_dataset)
        with pytest.raises(InvalidParameterError):
            impute_multiple(small_dataset, draws, RbiMethod.J2R, 1000, substream(1))

    def test_rubin_fast_path_matches_public_route(self, small_dataset):
        draws = self._draws(small_dataset)
        m = 20
        pooled_fast = rubin_estimate(
            small_dataset, draws, RbiMethod.CIR, m, substream(9, 1)
        )
        datasets = impute_multiple(
            small_dataset, draws, RbiMethod.CIR, m, substream(9, 1)
        )
        points, variances = zip(*(analyze_ancova(d) for d in datasets))
        pooled_ref = rubins_rules(points, variances)
        assert_allclose(pooled_fast.point, pooled_ref.point, rtol=1e-10)
        assert_allclose(pooled_fast.se, pooled_ref.se, rtol=1e-10)

    def test_zero_cross_covariance_draw_centres_on_post_mean(self):
        # diagonal covariance: no regression adjustment, imputed values
        # average to the post-ICE means
        sched = VisitSchedule((0.0, 1.0, 2.0))
        active = MvnParams(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 1.0, 1.0]))
        reference = MvnParams(np.array([0.0, 0.0, 0.0]), np.diag([1.0, 1.0, 1.0]))
        dist = build_imputation_distribution(RbiMethod.J2R, active, reference, 0)
        from refbased.estimators import _conditional_pieces

        reg, cond = _conditional_pieces(dist.cov, 1)
        assert_allclose(reg, 0.0, atol=1e-14)
        rng = substream(30)
        prefix = np.full((4000, 1), 9.0)  # extreme observed values, no effect
        means = dist.mean[1:] + (prefix - dist.mean[:1]) @ reg.T
        noise = rng.standard_normal((4000, 2)) @ np.linalg.cholesky(cond).T
        sample = means + noise
        assert_allclose(sample.mean(axis=0), dist.mean[1:], atol=0.06)


class TestConditionalMeanImpute:
    def test_idempotent_and_preserves_completers(self, small_dataset):
        mle = fit_mle(small_dataset)
        once = conditional_mean_impute(small_dataset, mle, RbiMethod.J2R)
        mle2 = fit_mle(once)
        twice = conditional_mean_impute(once, mle2, RbiMethod.J2R)
        for a, b in zip(once.patients, twice.patients):
            assert a.outcomes == pytest.approx(b.outcomes)

    def test_diagonal_covariance_fills_post_means_exactly(self):
        sched = VisitSchedule((0.0, 1.0, 2.0))
        rng = substream(31)
        recs = []
        for i in range(6):
            vals = tuple(rng.standard_normal(3))
            recs.append(
                PatientRecord(id=f"a{i}", arm=Arm.ACTIVE, outcomes=vals, last_observed=2)
            )
            recs.append(
                PatientRecord(
                    id=f"r{i}", arm=Arm.REFERENCE, outcomes=vals, last_observed=2
                )
            )
        recs.append(
            PatientRecord(
                id="adrop",
                arm=Arm.ACTIVE,
                outcomes=(1.5, None, None),
                last_observed=0,
            )
        )
        data = TrialDataset(schedule=sched, patients=tuple(recs))
        active = MvnParams(np.array([1.0, 2.0, 3.0]), np.eye(3))
        reference = MvnParams(np.array([0.0, -1.0, -2.0]), np.eye(3))
        from refbased.mmrm import MleFit

        mle = MleFit(
            active=active, reference=reference, loglik=0.0, n_active=7, n_reference=6
        )
        completed = conditional_mean_impute(data, mle, RbiMethod.J2R)
        filled = [r for r in completed.patients if r.id == "adrop"][0]
        assert filled.outcomes[1:] == pytest.approx((-1.0, -2.0))


class TestAncova:
    def test_equal_final_means_give_zero(self):
        rng = substream(40)
        sched = VisitSchedule((0.0, 1.0))
        recs = []
        vals = rng.standard_normal(40)
        for i in range(20):
            recs.append(
                PatientRecord(
                    id=f"a{i}", arm=Arm.ACTIVE, outcomes=(vals[i], 5.0), last_observed=1
                )
            )
            recs.append(
                PatientRecord(
                    id=f"r{i}",
                    arm=Arm.REFERENCE,
                    outcomes=(vals[20 + i], 5.0),
                    last_observed=1,
                )
            )
        point, var = analyze_ancova(TrialDataset(schedule=sched, patients=tuple(recs)))
        assert abs(point) < 1e-12

    def test_reduces_to_difference_in_means_for_uncorrelated_baseline(self):
        rng = substream(41)
        n = 4000
        sched = VisitSchedule((0.0, 1.0))
        y0 = rng.standard_normal(2 * n)
        yf = np.concatenate([rng.standard_normal(n) + 1.0, rng.standard_normal(n)])
        recs = [
            PatientRecord(
                id=f"a{i}", arm=Arm.ACTIVE, outcomes=(y0[i], yf[i]), last_observed=1
            )
            for i in range(n)
        ] + [
            PatientRecord(
                id=f"r{i}",
                arm=Arm.REFERENCE,
                outcomes=(y0[n + i], yf[n + i]),
                last_observed=1,
            )
            for i in range(n)
        ]
        point, _ = analyze_ancova(TrialDataset(schedule=sched, patients=tuple(recs)))
        diff = yf[:n].mean() - yf[n:].mean()
        assert abs(point - diff) < 0.05

    def test_matches_normal_equations_oracle(self):
        y0 = np.array([1.0, 2.0, 3.0, 1.5, 2.5, 3.5])
        yf = np.array([2.0, 2.5, 4.0, 1.0, 2.0, 3.0])
        treat = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        sched = VisitSchedule((0.0, 1.0))
        recs = [
            PatientRecord(
                id=f"p{i}",
                arm=Arm.ACTIVE if treat[i] else Arm.REFERENCE,
                outcomes=(y0[i], yf[i]),
                last_observed=1,
            )
            for i in range(6)
        ]
        point, var = analyze_ancova(TrialDataset(schedule=sched, patients=tuple(recs)))
        point_o, var_o = ols_treatment_coef(y0, yf, treat)
        assert_allclose(point, point_o, atol=1e-10)
        assert_allclose(var, var_o, atol=1e-10)

    def test_collinear_design_falls_back_with_warning(self):
        sched = VisitSchedule((0.0, 1.0))
        recs = [
            PatientRecord(
                id=f"a{i}", arm=Arm.ACTIVE, outcomes=(1.0, 2.0 + i), last_observed=1
            )
            for i in range(3)
        ] + [
            PatientRecord(
                id=f"r{i}", arm=Arm.REFERENCE, outcomes=(1.0, 1.0 + i), last_observed=1
            )
            for i in range(3)
        ]
        data = TrialDataset(schedule=sched, patients=tuple(recs))
        with pytest.warns(UserWarning, match="collinear"):
            point, var = analyze_ancova(data)
        assert point == pytest.approx(1.0)


class TestRubinsRules:
    def test_zero_between_variance(self):
        pooled = rubins_rules([2.0, 2.0, 2.0], [0.25, 0.25, 0.25])
        assert pooled.point == 2.0
        assert pooled.se == pytest.approx(0.5)
        assert pooled.between == 0.0

    def test_worked_fixture(self):
        pooled = rubins_rules([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        assert pooled.point == pytest.approx(2.0)
        assert pooled.se**2 == pytest.approx(0.5 + (4.0 / 3.0) * 1.0)
        assert pooled.se**2 == pytest.approx(1.8333, abs=1e-4)

    def test_total_at_least_within(self):
        rng = substream(50)
        for _ in range(50):
            m = int(rng.integers(2, 30))
            pooled = rubins_rules(rng.standard_normal(m), rng.random(m) + 0.1)
            assert pooled.se**2 >= pooled.within - 1e-12

    def test_needs_two(self):
        with pytest.raises(InvalidParameterError):
            rubins_rules([1.0], [1.0])


class TestJackknife:
    def test_sample_mean_identity(self):
        # jackknife SE of the mean equals s/sqrt(n) exactly
        data = make_monotone_dataset(seed=60, n_per_arm=15, dropout_prob=0.0)

        def final_mean(ds):
            vals = [r.outcomes[-1] for r in ds.patients]
            return float(np.mean(vals))

        point, se = jackknife_se(data, final_mean)
        vals = np.array([r.outcomes[-1] for r in data.patients])
        assert_allclose(se, vals.std(ddof=1) / np.sqrt(len(vals)), rtol=1e-10)
        assert point == pytest.approx(vals.mean())

    def test_duplicated_dataset_shrinks_se(self):
        data = make_monotone_dataset(seed=61, n_per_arm=20, dropout_prob=0.07)
        doubled_recs = []
        for rec in data.patients:
            doubled_recs.append(rec)
            doubled_recs.append(
                PatientRecord(
                    id=rec.id + "-dup",
                    arm=rec.arm,
                    outcomes=rec.outcomes,
                    last_observed=rec.last_observed,
                )
            )
        doubled = TrialDataset(schedule=data.schedule, patients=tuple(doubled_recs))
        est = condmean_estimator(RbiMethod.J2R)
        point1, se1 = jackknife_se(data, est)
        point2, se2 = jackknife_se(doubled, est)
        assert point2 == pytest.approx(point1, abs=1e-10)
        n = len(data.patients)
        # direct computation: duplicating every patient scales the mean
        # estimator's jackknife SE by sqrt((n-1)/(2n-1))
        assert se2 / se1 == pytest.approx(1 / np.sqrt(2), rel=0.12)

    def test_fast_path_matches_generic(self, small_dataset):
        fast = condmean_jackknife(small_dataset, list(RbiMethod))
        for method in RbiMethod:
            point_g, se_g = jackknife_se(small_dataset, condmean_estimator(method))
            point_f, se_f = fast[method]
            assert_allclose(point_f, point_g, rtol=1e-8)
            assert_allclose(se_f, se_g, rtol=1e-6)

    def test_needs_three_per_arm(self):
        sched = VisitSchedule((0.0, 1.0))
        recs = [
            PatientRecord(id=f"a{i}", arm=Arm.ACTIVE, outcomes=(1.0, 2.0 + i), last_observed=1)
            for i in range(2)
        ] + [
            PatientRecord(id=f"r{i}", arm=Arm.REFERENCE, outcomes=(1.0, float(i)), last_observed=1)
            for i in range(3)
        ]
        data = TrialDataset(schedule=sched, patients=tuple(recs))
        with pytest.raises(InvalidParameterError):
            jackknife_se(data, lambda d: 0.0)
