"""Losses. Each returns the batch-mean value and the gradient of that value."""

import numpy as np

from ..schemas import Tensor
from .layers import NNError

BCE_CLAMP_TOLERANCE = 1e-9
_TINY = np.finfo(np.float64).tiny
_EPS = np.finfo(np.float64).eps


class LossInputError(NNError):
    pass


def one_hot(labels: np.ndarray, n_classes: int) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LossInputError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_categorical_ce(probs: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean -log p[label]; the gradient is taken w.r.t. the pre-softmax logits."""
    n, n_classes = probs.shape
    if not np.allclose(probs.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
        raise LossInputError("categorical cross-entropy needs probability rows")
    targets = one_hot(labels, n_classes)
    picked = probs[np.arange(n), labels]
    value = -np.mean(np.log(np.maximum(picked, _TINY)))
    return float(value), (probs - targets) / n


def loss_binary_ce(outputs: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    """Mean over batch and classes of -[t log o + (1 - t) log(1 - o)].

    Outputs are clamped to [tiny, 1 - eps] and the gradient is the exact
    derivative at the clamped value.
    """
    if outputs.min() < -BCE_CLAMP_TOLERANCE or outputs.max() > 1.0 + BCE_CLAMP_TOLERANCE:
        raise LossInputError("binary cross-entropy outputs must lie in (0, 1)")
    o = np.clip(outputs, _TINY, 1.0 - _EPS)
    value = -np.mean(targets * np.log(o) + (1.0 - targets) * np.log1p(-o))
    grad = (-targets / o + (1.0 - targets) / (1.0 - o)) / outputs.size
    return float(value), grad


def loss_mse(predictions: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    residual = predictions.reshape(len(predictions)) - np.asarray(targets, dtype=np.float64)
    value = np.mean(residual**2)
    return float(value), (2.0 * residual / len(residual)).reshape(predictions.shape)


def loss_gaussian_nll(mean: Tensor, variance: Tensor, targets: Tensor) -> tuple[float, tuple[Tensor, Tensor]]:
    """0.5 N^-1 sum(log s2 + (mu - y)^2 / s2), with gradients for both heads."""
    if np.any(variance <= 0.0):
        raise LossInputError("gaussian NLL needs strictly positive variances")
    mu = mean.reshape(len(mean))
    s2 = variance.reshape(len(variance))
    residual = mu - np.asarray(targets, dtype=np.float64)
    n = len(residual)
    value = 0.5 * np.mean(np.log(s2) + residual**2 / s2)
    grad_mean = residual / s2 / n
    grad_var = 0.5 * (1.0 / s2 - residual**2 / s2**2) / n
    return float(value), (grad_mean.reshape(mean.shape), grad_var.reshape(variance.shape))
