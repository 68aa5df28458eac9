import numpy as np
from loguru import logger

from ..nn.layers import RBFOutput
from ..nn.model import Network
from ..schemas import Method, Mode, PredictionSet, Tensor


class NotAnRbfModelError(Exception):
    pass


def duq_forward(model: Network, x: Tensor) -> Tensor:
    """Per-class kernel values in (0, 1], shape (n, C)."""
    if not isinstance(model.layers[-1], RBFOutput):
        raise NotAnRbfModelError("DUQ needs a model ending in an rbf_output layer")
    return model.forward(x, Mode.eval)


def duq_to_probs(kernels: Tensor) -> Tensor:
    """Normalise kernel rows to sum to one; underflowed (all-zero) rows become uniform."""
    totals = kernels.sum(axis=1, keepdims=True)
    dead = totals[:, 0] <= 0.0
    if dead.any():
        logger.warning("{} of {} samples have all DUQ kernels underflowed to zero", int(dead.sum()), len(kernels))
    probs = np.where(totals > 0.0, kernels / np.where(totals > 0.0, totals, 1.0), 1.0 / kernels.shape[1])
    return probs


def predict_duq(model: Network, x: Tensor) -> PredictionSet:
    kernels = duq_forward(model, x)
    return PredictionSet(method=Method.duq, probs=duq_to_probs(kernels), kernels=kernels)
