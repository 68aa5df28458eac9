import numpy as np
from loguru import logger

from ..nn.losses import loss_categorical_ce
from ..nn.model import Network
from ..schemas import Aggregator, Method, Mode, PredictionSet, Tensor


class EmptyScoresError(Exception):
    pass


def aggregate(v: Tensor, aggregator: Aggregator) -> float:
    match aggregator:
        case Aggregator.l1:
            return float(np.abs(v).sum())
        case Aggregator.l2:
            return float(np.sqrt((v * v).sum()))
        case Aggregator.mean:
            return float(v.mean())
        case Aggregator.std:
            return float(v.std())
        case Aggregator.min:
            return float(v.min())
        case Aggregator.max:
            return float(v.max())
    raise ValueError(f"unknown aggregator {aggregator}")


def parameter_gradient(model: Network, sample: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax output and the flattened CE gradient for the predicted (virtual) label of one sample."""
    probs = model.forward(sample[None], Mode.eval)
    virtual_label = np.argmax(probs, axis=1)
    _, grad = loss_categorical_ce(probs, virtual_label)
    model.backward(grad, from_logits=True)
    return probs[0], np.concatenate([g.ravel() for g in model.gradients().values()])


def gradient_uncertainty(model: Network, x: Tensor, aggregator: Aggregator = Aggregator.l1) -> tuple[Tensor, Tensor]:
    """
    Raw gradient scores, one per sample, plus the softmax outputs they came from.

    Each sample is run on its own in eval mode, so batchnorm uses its running
    statistics and every parameter (batchnorm scale and shift included)
    contributes to the gradient vector.
    """
    probs = np.empty((len(x), *model.layers[-1].out_shape))
    scores = np.empty(len(x))
    for i in range(len(x)):
        probs[i], v = parameter_gradient(model, x[i])
        scores[i] = aggregate(v, aggregator)
    return scores, probs


def gradient_to_confidence(*score_sets: Tensor) -> list[Tensor]:
    """
    Min-max normalise raw scores jointly over every set and map them to p = 1 - g.

    Sets compared in one metric must be passed together so their confidences
    share a scale. A constant score range gives p = 1 everywhere.

    Raises:
        EmptyScoresError: If no scores are given
    """
    if not score_sets or sum(len(s) for s in score_sets) == 0:
        raise EmptyScoresError("cannot normalise an empty set of gradient scores")
    union = np.concatenate(score_sets)
    low, high = union.min(), union.max()
    if high == low:
        logger.warning("gradient scores are constant ({}); all confidences set to 1", low)
        return [np.ones(len(s)) for s in score_sets]
    logger.debug("gradient score range [{}, {}]", low, high)
    return [1.0 - (s - low) / (high - low) for s in score_sets]


def gradient_prediction(probs: Tensor, scores: Tensor, confidence: Tensor) -> PredictionSet:
    return PredictionSet(method=Method.gradient, probs=probs, raw_score=scores, confidence=confidence)


def predict_gradient(model: Network, x: Tensor, aggregator: Aggregator = Aggregator.l1) -> PredictionSet:
    """Score ``x`` and normalise over ``x`` alone; use gradient_to_confidence for joint scales."""
    scores, probs = gradient_uncertainty(model, x, aggregator)
    (confidence,) = gradient_to_confidence(scores)
    return gradient_prediction(probs, scores, confidence)
