from typing import Literal

import numpy as np
from loguru import logger

from ..nn.layers import Dropout, DropConnect, FlipoutDense, Layer
from ..nn.model import Network
from ..schemas import Method, Mode, PredictionSet, Tensor

McKind = Literal["dropout", "dropconnect", "flipout"]

_LAYERS: dict[str, tuple[type[Layer], Method]] = {
    "dropout": (Dropout, Method.dropout),
    "dropconnect": (DropConnect, Method.dropconnect),
    "flipout": (FlipoutDense, Method.flipout),
}


class MissingStochasticLayerError(Exception):
    pass


def predict_mc(model: Network, x: Tensor, n_samples: int, kind: McKind, rng: np.random.Generator) -> PredictionSet:
    """
    Average ``n_samples`` stochastic eval-mode forward passes.

    Each pass draws its masks from its own child of ``rng``, so the result
    does not depend on how passes are scheduled. Batchnorm stays in eval mode.

    Raises:
        MissingStochasticLayerError: If the model has no layer of ``kind``
            that stays stochastic at evaluation time
    """
    if n_samples < 1:
        raise ValueError(f"need at least one MC pass, got {n_samples}")
    layer_type, method = _LAYERS[kind]
    if not any(layer.stochastic_eval for layer in model.find(layer_type)):
        raise MissingStochasticLayerError(f"model has no {kind} layer enabled at evaluation time")

    total = np.zeros((len(x), *model.layers[-1].out_shape))
    for child in rng.spawn(n_samples):
        total += model.forward(x, Mode.eval, child)
    logger.debug("{} MC passes over {} samples ({})", n_samples, len(x), kind)
    return PredictionSet(method=method, probs=total / n_samples)
