import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochens.errors import ConfigError, DomainError, ShapeError
from stochens.metrics import (
    MetricsReport,
    PredictiveDistribution,
    agreement,
    ece,
    entropy_of,
    evaluate,
    mean_abs_diff,
    mutual_information,
    odd_auroc,
    predictive_entropy,
    predictive_variance,
)


def pd_from(probs, stack=None, points=None):
    return PredictiveDistribution(
        probs=np.asarray(probs, dtype=float),
        member_stack=None if stack is None else np.asarray(stack, dtype=float),
        points=points,
    )


def random_stack(rng, m=5, n=20, c=3):
    raw = rng.random((m, n, c)) + 1e-3
    stack = raw / raw.sum(axis=2, keepdims=True)
    return PredictiveDistribution(probs=stack.mean(axis=0), member_stack=stack)


class TestEntropy:
    def test_uniform_binary(self):
        pd = pd_from([[0.5, 0.5]])
        assert math.isclose(predictive_entropy(pd)[0], math.log(2), rel_tol=1e-12)

    def test_one_hot_is_zero(self):
        assert predictive_entropy(pd_from([[1.0, 0.0]]))[0] == 0.0

    def test_analytic_value(self):
        expected = -0.25 * math.log(0.25) - 0.75 * math.log(0.75)
        assert math.isclose(
            predictive_entropy(pd_from([[0.25, 0.75]]))[0], expected, rel_tol=1e-12
        )
        assert math.isclose(expected, 0.5623, abs_tol=5e-5)

    def test_bounded_by_log_c(self):
        rng = np.random.default_rng(0)
        pd = random_stack(rng, c=4)
        entropy = predictive_entropy(pd)
        assert np.all(entropy >= 0.0)
        assert np.all(entropy <= math.log(4) + 1e-12)


class TestMutualInformation:
    def test_identical_members_zero(self):
        stack = np.tile([[0.3, 0.7]], (4, 1, 1))
        pd = pd_from([[0.3, 0.7]], stack=stack)
        assert np.allclose(mutual_information(pd), 0.0, atol=1e-12)

    def test_disjoint_one_hot_members(self):
        stack = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        pd = pd_from([[0.5, 0.5]], stack=stack)
        assert math.isclose(mutual_information(pd)[0], math.log(2), rel_tol=1e-12)

    def test_matches_independent_two_pass_computation(self):
        rng = np.random.default_rng(1)
        pd = random_stack(rng, m=3, n=11, c=3)
        expected = np.empty(11)
        for i in range(11):
            mean_row = pd.member_stack[:, i, :].mean(axis=0)
            h_mean = -sum(p * math.log(p) for p in mean_row if p > 0)
            h_members = [
                -sum(p * math.log(p) for p in row if p > 0)
                for row in pd.member_stack[:, i, :]
            ]
            expected[i] = h_mean - sum(h_members) / 3
        assert np.abs(mutual_information(pd) - expected).max() < 1e-12

    def test_jensen_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pd = random_stack(rng, m=4, n=15, c=3)
            mi = mutual_information(pd)
            assert np.all(mi >= 0.0)
            assert np.all(mi <= predictive_entropy(pd) + 1e-12)

    def test_requires_member_information(self):
        with pytest.raises(ConfigError):
            mutual_information(pd_from([[0.5, 0.5]]))

    def test_streaming_entropy_fallback(self):
        stack = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        pd = PredictiveDistribution(
            probs=np.array([[0.5, 0.5]]),
            mean_member_entropy=entropy_of(stack).mean(axis=0),
        )
        assert math.isclose(mutual_information(pd)[0], math.log(2), rel_tol=1e-12)


class TestAgreementVariance:
    def test_self_agreement(self):
        rng = np.random.default_rng(3)
        pd = random_stack(rng)
        assert agreement(pd, pd) == 1.0
        assert predictive_variance(pd, pd) == 0.0

    def test_flipped_argmax(self):
        pd = pd_from([[0.9, 0.1], [0.2, 0.8]])
        ref = pd_from([[0.1, 0.9], [0.7, 0.3]])
        assert agreement(pd, ref) == 0.0

    def test_disjoint_one_hot_variance_is_one(self):
        pd = pd_from([[1.0, 0.0], [1.0, 0.0]])
        ref = pd_from([[0.0, 1.0], [0.0, 1.0]])
        assert predictive_variance(pd, ref) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = random_stack(rng), random_stack(rng)
        assert agreement(a, b) == agreement(b, a)
        assert predictive_variance(a, b) == predictive_variance(b, a)

    def test_point_mismatch_rejected(self):
        a = pd_from([[0.5, 0.5]], points=np.array([[0.0, 0.0]]))
        b = pd_from([[0.5, 0.5]], points=np.array([[1.0, 0.0]]))
        with pytest.raises(ShapeError):
            agreement(a, b)


class TestECE:
    def test_confident_and_correct(self):
        pd = pd_from([[1.0, 0.0]] * 5)
        value, _ = ece(pd, np.zeros(5, dtype=int))
        assert value == 0.0

    def test_confident_and_wrong(self):
        pd = pd_from([[1.0, 0.0]] * 5)
        value, _ = ece(pd, np.ones(5, dtype=int))
        assert value == 1.0

    def test_perfectly_calibrated_two_level_construction(self):
        probs = [[0.8, 0.2]] * 10 + [[0.6, 0.4]] * 10
        labels = np.array([0] * 8 + [1] * 2 + [0] * 6 + [1] * 4)
        value, curve = ece(pd_from(probs), labels)
        assert abs(value) < 1e-12
        assert sum(count for _, _, count in curve) == 20

    def test_bin_counts_sum_to_n(self):
        rng = np.random.default_rng(5)
        pd = random_stack(rng, n=57)
        labels = rng.integers(0, 3, 57)
        _, curve = ece(pd, labels)
        assert sum(count for _, _, count in curve) == 57

    def test_label_range_checked(self):
        pd = pd_from([[0.5, 0.5]])
        with pytest.raises(DomainError):
            ece(pd, np.array([2]))


class TestOddAuroc:
    def test_fully_separated(self):
        assert odd_auroc([0.1, 0.2], [0.9, 1.0]) == 1.0

    def test_identical_distributions(self):
        scores = np.array([0.3, 0.5, 0.7])
        assert odd_auroc(scores, scores.copy()) == 0.5

    def test_pair_counting_case(self):
        assert odd_auroc([0.1, 0.2], [0.15, 0.3]) == 0.75

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(0.01, 10.0), min_size=2, max_size=20),
        st.lists(st.floats(0.01, 10.0), min_size=2, max_size=20),
    )
    def test_monotone_transform_invariance(self, inside, outside):
        base = odd_auroc(inside, outside)
        squashed = odd_auroc(np.log(inside), np.log(outside))
        assert math.isclose(base, squashed, abs_tol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            odd_auroc([], [0.5])


class TestMeanAbsDiff:
    def test_equal_maps(self):
        assert mean_abs_diff([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_constant_offset(self):
        a = np.linspace(0, 1, 7)
        assert math.isclose(mean_abs_diff(a, a + 0.25), 0.25, rel_tol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mean_abs_diff([1.0], [1.0, 2.0])


class TestEvaluate:
    def test_perfect_self_reference(self):
        rng = np.random.default_rng(6)
        pd = random_stack(rng, m=4, n=30, c=2)
        labels = pd.probs.argmax(axis=1)
        report = evaluate(pd, labels=labels, reference=pd)
        assert report.accuracy == 1.0
        assert report.agreement == 1.0
        assert report.variance == 0.0
        assert report.mean_abs_entropy_diff == 0.0
        assert report.mean_abs_mi_diff == 0.0

    def test_uniform_predictions(self):
        n = 40
        pd = pd_from(np.full((n, 2), 0.5))
        labels = np.array([0] * 25 + [1] * 15)
        report = evaluate(pd, labels=labels)
        assert math.isclose(report.loss, math.log(2), rel_tol=1e-12)
        assert math.isclose(report.ece, abs(0.5 - report.accuracy), rel_tol=1e-12)

    def test_fields_default_to_none(self):
        rng = np.random.default_rng(7)
        report = evaluate(random_stack(rng))
        assert report.accuracy is None
        assert report.agreement is None
        assert report.odd_auroc is None

    def test_serialization_has_fixed_field_names(self):
        rng = np.random.default_rng(8)
        payload = evaluate(random_stack(rng)).to_dict()
        expected = {
            "accuracy", "loss", "ece", "agreement", "variance", "odd_auroc",
            "mean_abs_entropy_diff", "mean_abs_mi_diff", "calibration_curve",
            "metadata",
        }
        assert set(payload) == expected

    def test_report_range_validation(self):
        with pytest.raises(DomainError):
            MetricsReport(accuracy=1.5)


class TestPredictiveDistribution:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(DomainError):
            PredictiveDistribution(probs=np.array([[0.5, 0.6]]))

    def test_stack_mean_must_match(self):
        with pytest.raises(DomainError):
            PredictiveDistribution(
                probs=np.array([[0.5, 0.5]]),
                member_stack=np.array([[[1.0, 0.0]], [[0.9, 0.1]]]),
            )
