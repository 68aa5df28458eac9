import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from uqbench.methods.gradient import gradient_to_confidence
from uqbench.metrics import (
    MetricError,
    confidence_scores,
    ece,
    ece_from_probs,
    entropy,
    max_prob,
    ood_suite,
    prediction_ece,
    roc_auc,
)
from uqbench.schemas import Method, Orientation, PredictionSet


def test_entropy_examples():
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(math.log(2))
    assert entropy(np.full(10, 0.1)) == pytest.approx(math.log(10))
    np.testing.assert_allclose(entropy(np.array([[1.0, 0.0], [0.5, 0.5]])), [0.0, math.log(2)])


def test_entropy_rejects_negative_probabilities():
    with pytest.raises(MetricError):
        entropy(np.array([1.5, -0.5]))


def test_max_prob():
    assert max_prob(np.array([0.2, 0.7, 0.1])) == 0.7
    np.testing.assert_array_equal(max_prob(np.array([[0.5, 0.5], [0.9, 0.1]])), [0.5, 0.9])


def test_perfectly_calibrated_bin_has_zero_ece():
    confidence = np.full(10, 0.8)
    correct = np.array([1] * 8 + [0] * 2)
    assert ece(confidence, correct).ece == pytest.approx(0.0, abs=1e-12)


def test_overconfident_predictions():
    assert ece(np.full(4, 1.0), np.zeros(4)).ece == 1.0
    assert ece(np.array([0.9, 0.9]), np.array([0, 0])).ece == pytest.approx(0.9)


def test_single_bin_is_the_global_gap():
    confidence = np.array([0.2, 0.6, 0.9])
    correct = np.array([1, 0, 1])
    assert ece(confidence, correct, n_bins=1).ece == pytest.approx(abs(2 / 3 - np.mean(confidence)))


def test_bin_edges_are_right_inclusive():
    report = ece(np.array([0.0, 0.5, 0.5000001, 1.0]), np.ones(4), n_bins=2)
    assert [b.count for b in report.bins] == [2, 2]
    assert report.bins[0].upper == 0.5


def test_ece_reports_all_bins():
    report = ece(np.array([0.95]), np.array([1]))
    assert len(report.bins) == 15
    assert sum(b.count for b in report.bins) == 1
    assert report.bins[-1].count == 1


def test_ece_rejects_mismatched_inputs():
    with pytest.raises(MetricError):
        ece(np.array([0.5, 0.5]), np.array([1]))
    with pytest.raises(MetricError):
        ece(np.array([0.5]), np.array([1]), n_bins=0)


@given(
    st.lists(
        st.tuples(st.floats(0.0, 1.0), st.booleans()),
        min_size=1,
        max_size=60,
    ),
    st.integers(1, 20),
)
def test_ece_matches_a_brute_force_sum(samples, n_bins):
    confidence = np.array([c for c, _ in samples])
    correct = np.array([float(k) for _, k in samples])
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    gaps = []
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        members = (confidence > lo) & (confidence <= hi)
        if b == 0:
            members |= confidence == 0.0
        if members.any():
            count = members.sum()
            gap = abs(math.fsum(correct[members]) / count - math.fsum(confidence[members]) / count)
            gaps.append(count / len(confidence) * gap)
    # same fsum order per bin, so the sums agree bit for bit
    assert ece(confidence, correct, n_bins).ece == min(math.fsum(gaps), 1.0)


def test_ece_from_probs_uses_argmax_correctness():
    probs = np.array([[0.9, 0.1], [0.3, 0.7]])
    report = ece_from_probs(probs, np.array([0, 0]), n_bins=10)
    assert report.ece == pytest.approx(0.5 * 0.1 + 0.5 * 0.7)


def test_auc_examples():
    assert roc_auc(np.array([2.0, 3.0]), np.array([0.0, 1.0])) == 1.0
    assert roc_auc(np.array([0.0, 1.0]), np.array([2.0, 3.0])) == 0.0
    assert roc_auc(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.5


def test_auc_lower_positive_flips_the_score():
    pos, neg = np.array([0.1, 0.4]), np.array([0.3, 0.9])
    assert roc_auc(pos, neg, Orientation.lower_positive) == pytest.approx(1.0 - roc_auc(pos, neg))
    assert roc_auc(pos, neg, Orientation.lower_positive) == 0.75


def test_auc_needs_both_sides():
    with pytest.raises(MetricError):
        roc_auc(np.array([]), np.array([1.0]))


@given(
    st.lists(st.integers(0, 5), min_size=1, max_size=30),
    st.lists(st.integers(0, 5), min_size=1, max_size=30),
)
def test_auc_agrees_with_sklearn(pos, neg):
    labels = np.r_[np.ones(len(pos)), np.zeros(len(neg))]
    expected = roc_auc_score(labels, np.r_[pos, neg])
    assert roc_auc(np.array(pos, float), np.array(neg, float)) == pytest.approx(expected)


def softmax_prediction(rows: list[list[float]], method: Method = Method.baseline) -> PredictionSet:
    return PredictionSet(method=method, probs=np.array(rows))


def test_ood_suite_separates_confident_from_uniform():
    train = softmax_prediction([[0.99, 0.01], [0.02, 0.98]])
    test = softmax_prediction([[0.9, 0.1], [0.15, 0.85]])
    ood = softmax_prediction([[0.5, 0.5], [0.55, 0.45]])
    result = ood_suite(train, test, ood, Method.baseline)
    assert result.test_vs_ood_entropy == 1.0
    assert result.test_vs_ood_maxprob == 1.0
    assert result.train_vs_ood_maxprob == 1.0
    assert result.train_vs_test_entropy == 1.0
    assert result.train_vs_test_maxprob == 1.0


def test_ood_suite_for_identical_predictions_is_chance():
    same = softmax_prediction([[0.7, 0.3], [0.6, 0.4]])
    result = ood_suite(same, same, same, Method.baseline)
    assert result.model_dump() == {name: 0.5 for name in result.model_dump()}


def gradient_set(scores: list[float]) -> PredictionSet:
    scores = np.array(scores)
    return PredictionSet(
        method=Method.gradient,
        probs=np.full((len(scores), 2), 0.5),
        raw_score=scores,
        confidence=np.zeros(len(scores)),
    )


def test_gradient_ood_suite_uses_pairwise_scales_and_skips_entropy():
    train, test, ood = gradient_set([0.0, 1.0]), gradient_set([2.0, 3.0]), gradient_set([10.0, 20.0])
    result = ood_suite(train, test, ood, Method.gradient)
    assert result.test_vs_ood_entropy is None
    assert result.train_vs_ood_entropy is None
    assert result.train_vs_test_entropy is None
    assert result.test_vs_ood_maxprob == 1.0
    assert result.train_vs_ood_maxprob == 1.0
    assert result.train_vs_test_maxprob == 1.0


def test_duq_ood_score_is_the_raw_kernel():
    pred = PredictionSet(
        method=Method.duq,
        probs=np.array([[0.5, 0.5]]),
        kernels=np.array([[0.2, 0.2]]),
    )
    np.testing.assert_array_equal(confidence_scores(pred), [0.2])


def test_gradient_ece_uses_its_confidence():
    pred = PredictionSet(
        method=Method.gradient,
        probs=np.array([[0.9, 0.1], [0.8, 0.2]]),
        raw_score=np.array([0.0, 1.0]),
        confidence=np.array([1.0, 0.0]),
    )
    assert prediction_ece(pred, np.array([0, 1]), n_bins=10).ece == 0.0


scores = st.lists(st.integers(-30, 30), min_size=1, max_size=40)


@given(scores, scores)
def test_auc_is_antisymmetric(a, b):
    assert roc_auc(np.array(a, float), np.array(b, float)) == pytest.approx(
        1.0 - roc_auc(np.array(b, float), np.array(a, float)), abs=1e-12
    )


@given(scores, scores)
def test_auc_depends_only_on_the_order_of_scores(a, b):
    a, b = np.array(a, float), np.array(b, float)
    assert roc_auc(np.exp(a), np.exp(b)) == roc_auc(a, b)
    assert roc_auc(3.0 * a + 1.0, 3.0 * b + 1.0) == roc_auc(a, b)


@given(
    st.lists(st.tuples(st.floats(0.0, 1.0), st.booleans()), min_size=1, max_size=60),
    st.randoms(use_true_random=False),
)
def test_ece_ignores_sample_order(samples, random):
    shuffled = list(samples)
    random.shuffle(shuffled)
    before = ece(np.array([c for c, _ in samples]), np.array([float(k) for _, k in samples]))
    after = ece(np.array([c for c, _ in shuffled]), np.array([float(k) for _, k in shuffled]))
    assert after.ece == before.ece


@given(st.lists(st.integers(0, 50), min_size=1, max_size=40), st.lists(st.integers(0, 50), min_size=1, max_size=40))
def test_gradient_auc_is_the_same_on_raw_scores_and_confidences(in_dist, ood):
    g_in, g_ood = np.array(in_dist, float), np.array(ood, float)
    p_in, p_ood = gradient_to_confidence(g_in, g_ood)
    raw = roc_auc(g_ood, g_in, Orientation.higher_positive)
    assert roc_auc(p_ood, p_in, Orientation.lower_positive) == pytest.approx(raw, abs=1e-12)
