"""Predictive entropy, maximum probability, expected calibration error and ROC-AUC."""

import math

import numpy as np
from loguru import logger
from scipy.special import entr
from scipy.stats import rankdata

from .methods.gradient import gradient_to_confidence
from .schemas import EceBin, EceReport, Method, OodSuiteResult, Orientation, PredictionSet, Tensor

DEFAULT_BINS = 15


class MetricError(Exception):
    pass


def entropy(probs: Tensor) -> Tensor | float:
    """Natural-log entropy of each probability row (0 log 0 = 0)."""
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0.0).any():
        raise MetricError("probabilities must be non-negative")
    h = entr(probs).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def max_prob(probs: Tensor) -> Tensor | float:
    m = np.asarray(probs, dtype=np.float64).max(axis=-1)
    return float(m) if m.ndim == 0 else m


def ece(confidence: Tensor, correct: Tensor, n_bins: int = DEFAULT_BINS) -> EceReport:
    """
    Expected calibration error over equal-width, right-inclusive bins on (0, 1].

    Confidence 0 falls into the first bin. Empty bins are reported with zero
    count and contribute nothing.
    """
    if n_bins < 1:
        raise MetricError(f"n_bins must be at least 1, got {n_bins}")
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidence.shape != correct.shape:
        raise MetricError(f"{confidence.shape} confidences but {correct.shape} correctness flags")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    index = np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, n_bins - 1)
    total = len(confidence)

    bins = []
    gaps = []
    for b in range(n_bins):
        members = index == b
        count = int(members.sum())
        if count:
            mean_conf = math.fsum(confidence[members]) / count
            accuracy = math.fsum(correct[members]) / count
            gaps.append(count / total * abs(accuracy - mean_conf))
        else:
            mean_conf = accuracy = 0.0
        bins.append(EceBin(lower=edges[b], upper=edges[b + 1], mean_confidence=mean_conf, accuracy=accuracy, count=count))
    return EceReport(ece=min(math.fsum(gaps), 1.0), bins=bins)


def ece_from_probs(probs: Tensor, labels: Tensor, n_bins: int = DEFAULT_BINS) -> EceReport:
    return ece(max_prob(probs), np.argmax(probs, axis=-1) == labels, n_bins)


def roc_auc(scores_positive: Tensor, scores_negative: Tensor, orientation: Orientation = Orientation.higher_positive) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(scores_positive, dtype=np.float64)
    neg = np.asarray(scores_negative, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("both sides of an AUC need at least one score")
    if orientation is Orientation.lower_positive:
        pos, neg = -pos, -neg
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confidence_scores(pred: PredictionSet) -> Tensor:
    """Per-sample max-prob score: GD confidence, unnormalised max DUQ kernel, else max probability."""
    if pred.method is Method.gradient:
        return pred.confidence
    if pred.method is Method.duq:
        return pred.kernels.max(axis=1)
    return pred.probs.max(axis=1)


def calibration_confidence(pred: PredictionSet) -> Tensor:
    """Confidence used for ECE; DUQ uses its normalised probabilities here."""
    if pred.method is Method.gradient:
        return pred.confidence
    return pred.probs.max(axis=1)


def entropy_scores(pred: PredictionSet) -> Tensor | None:
    if pred.method is Method.gradient:
        return None
    return entropy(pred.probs)


def prediction_ece(pred: PredictionSet, labels: Tensor, n_bins: int = DEFAULT_BINS) -> EceReport:
    return ece(calibration_confidence(pred), np.argmax(pred.probs, axis=1) == labels, n_bins)


def _pair(negative: PredictionSet, positive: PredictionSet, method: Method) -> tuple[float | None, float]:
    if method is Method.gradient:
        neg_conf, pos_conf = gradient_to_confidence(negative.raw_score, positive.raw_score)
        return None, roc_auc(pos_conf, neg_conf, Orientation.lower_positive)
    return (
        roc_auc(entropy_scores(positive), entropy_scores(negative), Orientation.higher_positive),
        roc_auc(confidence_scores(positive), confidence_scores(negative), Orientation.lower_positive),
    )


def ood_suite(pred_train: PredictionSet, pred_test: PredictionSet, pred_ood: PredictionSet, method: Method) -> OodSuiteResult:
    """
    AUCs of the three pairings with the unseen side as the positive class.

    Gradient confidences are re-normalised over the union of each pair and
    the entropy AUCs are skipped for the gradient method.
    """
    if method is Method.gradient:
        logger.debug("gradient method: entropy AUCs skipped")
    test_ood = _pair(pred_test, pred_ood, method)
    train_ood = _pair(pred_train, pred_ood, method)
    train_test = _pair(pred_train, pred_test, method)
    return OodSuiteResult(
        test_vs_ood_entropy=test_ood[0],
        test_vs_ood_maxprob=test_ood[1],
        train_vs_ood_entropy=train_ood[0],
        train_vs_ood_maxprob=train_ood[1],
        train_vs_test_entropy=train_test[0],
        train_vs_test_maxprob=train_test[1],
    )
