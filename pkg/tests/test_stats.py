"""Tests for calibration, distribution tests, detectors, and the repeat policy."""

import math
import random

import numpy as np
import pytest
from scipy import special
from scipy import stats as scipy_stats

from timecheck.errors import DegenerateSeries, InsufficientSamples, MaxTrialsExceeded
from timecheck.stats import (
    calibrate,
    confusion_report,
    detect,
    detect_chebyshev,
    detect_modified_z,
    detect_percentile,
    detect_zscore,
    ks_test,
    repeat_policy,
    serial_correlation,
    t_test,
)


class TestCalibrate:
    def test_hand_arithmetic(self):
        p = calibrate([1, 2, 3, 4, 5])
        assert p.mean == 3 and p.median == 3 and p.mad == 1
        assert p.n == 5
        assert p.p2_5 == pytest.approx(1.1)
        assert p.p97_5 == pytest.approx(4.9)

    def test_constant_samples_valid_zero_spread(self):
        p = calibrate([7.0] * 10)
        assert p.std == 0.0 and p.mad == 0.0
        with pytest.raises(DegenerateSeries):
            detect_zscore(p, 7.0)
        with pytest.raises(DegenerateSeries):
            detect_modified_z(p, 7.0)

    def test_insufficient(self):
        with pytest.raises(InsufficientSamples):
            calibrate([1.0])

    def test_gaussian_recovery(self):
        rng = random.Random(0)
        xs = [rng.gauss(100.0, 5.0) for _ in range(2000)]
        p = calibrate(xs)
        assert abs(p.mean - 100.0) < 3 * 5.0 / math.sqrt(2000)
        assert abs(p.std - 5.0) < 0.5

    def test_sample_std_uses_n_minus_1(self):
        assert calibrate([1.0, 3.0]).std == pytest.approx(np.std([1, 3], ddof=1))


class TestSerialCorrelation:
    def test_alternating_series_flagged(self):
        sc = serial_correlation([1.0, -1.0] * 25, 3)
        assert sc.autocorr[0] == pytest.approx(-0.98, abs=0.02)
        assert 1 in sc.flagged_lags
        assert not sc.white

    def test_constant_series_degenerate(self):
        with pytest.raises(DegenerateSeries):
            serial_correlation([3.0] * 50, 5)

    def test_lag_bounds(self):
        with pytest.raises(InsufficientSamples):
            serial_correlation([1.0, 2.0, 3.0], 3)

    def test_iid_noise_mostly_white(self):
        rng = random.Random(1)
        ok = 0
        for _ in range(40):
            xs = [rng.gauss(0, 1) for _ in range(50)]
            ok += serial_correlation(xs, 10).white
        assert ok >= 34  # Ljung-Box at 95%: ~5% false alarms expected

    def test_band_value(self):
        sc = serial_correlation(list(np.random.default_rng(2).normal(size=50)), 5)
        assert sc.band == pytest.approx(1.96 / math.sqrt(50))


class TestTTest:
    def test_identical_samples(self):
        t, p = t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert t == 0.0 and p == 1.0

    def test_scipy_oracle_fixed_vectors(self):
        rng = np.random.default_rng(3)
        a = rng.normal(10, 2, 40)
        b = rng.normal(11, 3, 55)
        t, p = t_test(a, b)
        t_ref, p_ref = scipy_stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(float(t_ref), rel=1e-12)
        assert p == pytest.approx(float(p_ref), rel=1e-10)

    def test_separated_scenarios_tiny_p(self):
        rng = random.Random(4)
        base = [rng.gauss(9.591e6, 185) for _ in range(50)]
        dram = [rng.gauss(9.595e6, 130) for _ in range(50)]
        _, p = t_test(base, dram)
        assert p < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(0, 1, 30), rng.normal(1, 2, 30)
        ta, pa = t_test(a, b)
        tb, pb = t_test(b, a)
        assert ta == -tb and pa == pb

    def test_degenerate(self):
        with pytest.raises(DegenerateSeries):
            t_test([5.0, 5.0, 5.0], [5.0, 5.0])
        with pytest.raises(InsufficientSamples):
            t_test([1.0], [1.0, 2.0])


class TestKsTest:
    def test_identical_samples(self):
        d, p = ks_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert d == 0.0 and p == 1.0

    def test_disjoint_supports(self):
        d, p = ks_test([1.0, 2.0, 3.0], [10.0, 11.0, 12.0])
        assert d == 1.0

    def test_statistic_matches_scipy_exactly(self):
        rng = np.random.default_rng(6)
        a = rng.normal(0, 1, 47)
        b = rng.normal(0.3, 1.4, 61)
        d, _ = ks_test(a, b)
        ref = scipy_stats.ks_2samp(a, b)
        assert d == pytest.approx(float(ref.statistic), abs=1e-15)

    def test_pvalue_matches_kolmogorov_limit(self):
        # oracle: scipy's independent implementation of the limiting law
        rng = np.random.default_rng(7)
        a = rng.normal(0, 1, 50)
        b = rng.normal(0.5, 1, 60)
        d, p = ks_test(a, b)
        en = math.sqrt(50 * 60 / 110)
        assert p == pytest.approx(float(special.kolmogorov(en * d)), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(0, 1, 30), rng.normal(1, 1, 40)
        da, pa = ks_test(a, b)
        db, pb = ks_test(b, a)
        assert da == db and pa == pb

    def test_ties_handled(self):
        d, _ = ks_test([1, 1, 1, 2], [1, 2, 2, 2])
        assert d == pytest.approx(0.5)


class TestDetectors:
    @pytest.fixture
    def profile(self):
        rng = random.Random(9)
        return calibrate([rng.gauss(1000.0, 10.0) for _ in range(200)])

    def test_percentile_band(self, profile):
        assert not detect_percentile(profile, profile.median).flagged
        assert detect_percentile(profile, max(profile.samples) + 100).flagged
        assert detect_percentile(profile, min(profile.samples) - 100).flagged

    def test_percentile_exhaustive_sweep(self, profile):
        # flags exactly the points strictly outside [p2.5, p97.5]
        for v in profile.samples:
            expect = v < profile.p2_5 or v > profile.p97_5
            assert detect_percentile(profile, v).flagged == expect

    def test_zscore(self, profile):
        assert detect_zscore(profile, profile.mean).score == 0.0
        assert not detect_zscore(profile, profile.mean).flagged
        v = detect_zscore(profile, profile.mean + 3 * profile.std)
        assert v.flagged and v.score == pytest.approx(3.0)

    def test_zscore_threshold_configurable(self, profile):
        point = profile.mean + 2.5 * profile.std
        assert detect_zscore(profile, point, threshold=2.0).flagged
        assert not detect_zscore(profile, point, threshold=3.0).flagged

    def test_modified_z_center(self):
        p = calibrate([1, 2, 3, 4, 5])
        assert detect_modified_z(p, 3).score == 0.0
        assert detect_modified_z(p, 3 + 1 / 0.6745 * 2.6).flagged

    def test_chebyshev(self, profile):
        assert not detect_chebyshev(profile, profile.mean + profile.std).flagged
        far = profile.mean + 215 * profile.std
        assert detect_chebyshev(profile, far).flagged
        assert 1 / 31.6 ** 2 < 0.0011  # bound claimed by the default k

    def test_translation_consistency(self):
        rng = random.Random(10)
        xs = [rng.gauss(0.0, 3.0) for _ in range(100)]
        points = [rng.gauss(0.0, 9.0) for _ in range(50)]
        shift = 5.0e6
        p0 = calibrate(xs)
        p1 = calibrate([x + shift for x in xs])
        for pt in points:
            for method in ("percentile", "zscore", "modz", "chebyshev"):
                assert (detect(method, p0, pt).flagged
                        == detect(method, p1, pt + shift).flagged)

    def test_zscore_gaussian_fpr_converges(self):
        # two-sided tail mass beyond 2 sigma is ~4.55%
        rng = random.Random(11)
        xs = [rng.gauss(0.0, 1.0) for _ in range(100_000)]
        p = calibrate(xs)
        fpr = sum(detect_zscore(p, x).flagged for x in xs) / len(xs)
        assert abs(fpr - 0.0455) < 0.005

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            detect("magic", calibrate([1.0, 2.0]), 1.0)


class TestConfusionReport:
    def test_perfect_separation(self):
        rng = random.Random(12)
        base = [rng.uniform(-100, 100) for _ in range(50)]
        attack = [rng.uniform(4000, 4200) for _ in range(50)]
        rows = confusion_report(base, attack, methods=("zscore", "modz"))
        assert rows["zscore"].fnr == 0.0
        assert rows["modz"].fnr == 0.0
        assert rows["zscore"].fpr == 0.0

    def test_attack_drawn_from_baseline_misses(self):
        # exchangeable points: FNR complements the per-method flag rate
        rng = random.Random(13)
        pool = [rng.gauss(0, 1) for _ in range(100)]
        rows = confusion_report(pool[:50], pool[50:], methods=("zscore",))
        assert rows["zscore"].fnr > 0.9

    def test_explicit_profile_disables_loo(self):
        base = [float(i) for i in range(50)]
        profile = calibrate(base)
        rows = confusion_report(base, [1000.0], methods=("percentile",), profile=profile)
        # self-inclusive: only points strictly outside the band flag
        flagged = sum(detect_percentile(profile, v).flagged for v in base)
        assert rows["percentile"].false_positives == flagged

    def test_empty_sets_rejected(self):
        with pytest.raises(InsufficientSamples):
            confusion_report([], [1.0])


class FakeMeasurement:
    def __init__(self, duration_us, nmi=False):
        self.duration_us = duration_us
        self.nmi = nmi


class TestRepeatPolicy:
    @pytest.fixture
    def profile(self):
        rng = random.Random(14)
        return calibrate([rng.gauss(1000.0, 10.0) for _ in range(100)])

    def test_three_trials_for_cube_target(self, profile):
        calls = []

        def challenger():
            calls.append(1)
            return FakeMeasurement(profile.median)

        decision = repeat_policy(profile, challenger, target_confidence=1e-3,
                                 per_trial_miss=0.1)
        assert decision.accepted and decision.trials == 3
        assert decision.residual_miss == pytest.approx(1e-3)

    def test_single_confident_trial(self, profile):
        decision = repeat_policy(profile, lambda: FakeMeasurement(profile.median),
                                 target_confidence=0.2, per_trial_miss=0.1)
        assert decision.accepted and decision.trials == 1

    def test_flag_rejects_immediately(self, profile):
        decision = repeat_policy(profile, lambda: FakeMeasurement(profile.mean + 1e6),
                                 target_confidence=1e-3, per_trial_miss=0.1)
        assert not decision.accepted and decision.trials == 1

    def test_nmi_retries_do_not_count(self, profile):
        feed = [FakeMeasurement(profile.median + 9e5, nmi=True),
                FakeMeasurement(profile.median),
                FakeMeasurement(profile.median),
                FakeMeasurement(profile.median)]
        decision = repeat_policy(profile, lambda: feed.pop(0),
                                 target_confidence=1e-3, per_trial_miss=0.1)
        assert decision.accepted and decision.trials == 3 and decision.nmi_retries == 1

    def test_cap_exceeded(self, profile):
        with pytest.raises(MaxTrialsExceeded):
            repeat_policy(profile, lambda: FakeMeasurement(profile.median),
                          target_confidence=1e-12, per_trial_miss=0.99, max_trials=5)

    def test_adversarial_stream_flags_quickly(self, profile):
        rng = random.Random(15)
        rejected = 0
        for _ in range(100):
            stream = (FakeMeasurement(rng.gauss(1000.0, 10.0) + 4000.0) for _ in iter(int, 1))
            decision = repeat_policy(profile, lambda s=stream: next(s),
                                     target_confidence=1e-6, per_trial_miss=0.1)
            rejected += not decision.accepted
        assert rejected >= 99

    def test_parameter_validation(self, profile):
        with pytest.raises(ValueError):
            repeat_policy(profile, lambda: FakeMeasurement(0), target_confidence=1.5)
        with pytest.raises(ValueError):
            repeat_policy(profile, lambda: FakeMeasurement(0), target_confidence=0.5,
                          per_trial_miss=1.0)
