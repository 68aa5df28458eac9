from .baseline import predict_baseline
from .duq import NotAnRbfModelError, duq_forward, duq_to_probs, predict_duq
from .ensemble import predict_ensemble, train_ensemble
from .gradient import (
    EmptyScoresError,
    aggregate,
    gradient_to_confidence,
    gradient_uncertainty,
    predict_gradient,
)
from .mc import MissingStochasticLayerError, predict_mc
from .registry import Predictor, fit_method, method_spec

__all__ = [
    "EmptyScoresError",
    "MissingStochasticLayerError",
    "NotAnRbfModelError",
    "Predictor",
    "aggregate",
    "duq_forward",
    "duq_to_probs",
    "fit_method",
    "gradient_to_confidence",
    "gradient_uncertainty",
    "method_spec",
    "predict_baseline",
    "predict_duq",
    "predict_ensemble",
    "predict_gradient",
    "predict_mc",
    "train_ensemble",
]
