import math

import numpy as np
from loguru import logger

from ..schemas import LabeledDataset, LossKind, Mode, TrainConfig
from .layers import NNError
from .losses import loss_binary_ce, loss_categorical_ce, loss_gaussian_nll, loss_mse, one_hot
from .model import TRAIN_STREAM, Network, stream
from .optim import Adam


class TrainingDivergedError(NNError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")


def batch_loss(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind,
    mode: Mode = Mode.train,
    rng: np.random.Generator | None = None,
    backward: bool = True,
) -> float:
    """Forward one batch, evaluate ``loss`` and (optionally) backpropagate it."""
    match loss:
        case LossKind.categorical_ce:
            probs = net.forward(x, mode, rng)
            value, grad = loss_categorical_ce(probs, y)
            if backward:
                net.backward(grad, from_logits=True)
        case LossKind.binary_ce:
            kernels = net.forward(x, mode, rng)
            value, grad = loss_binary_ce(kernels, one_hot(y, kernels.shape[1]))
            if backward:
                net.backward(grad)
        case LossKind.mse:
            out = net.forward(x, mode, rng)
            value, grad = loss_mse(out, y)
            if backward:
                net.backward(grad)
        case LossKind.gaussian_nll:
            mean, variance = net.forward_heads(x, mode, rng)
            if variance is None:
                raise NNError("gaussian NLL needs a model with a variance head")
            value, (grad_mean, grad_var) = loss_gaussian_nll(mean, variance, y)
            if backward:
                net.backward(grad_mean, variance_grad=grad_var)
        case _:
            raise NNError(f"unknown loss {loss}")
    return value


def planned_epochs(cfg: TrainConfig, n: int) -> int:
    """``cfg.epochs``, stretched until at least ``cfg.min_steps`` optimizer steps are taken.

    Zero epochs always means no training.
    """
    if cfg.epochs == 0 or cfg.min_steps == 0:
        return cfg.epochs
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    return max(cfg.epochs, math.ceil(cfg.min_steps / steps_per_epoch))


def train(net: Network, data: LabeledDataset, cfg: TrainConfig) -> Network:
    """Mini-batch Adam for ``planned_epochs`` epochs; returns the final-epoch weights.

    Shuffle order and every random mask come from one generator seeded by
    ``cfg.seed``, so (seed, data, config) fix the result.
    """
    if len(data) == 0:
        raise NNError(f"cannot train on empty dataset {data.name}")
    rng = stream(cfg.seed, TRAIN_STREAM)
    optimizer = Adam(cfg)
    x, y = data.features, data.labels
    n = len(data)
    epochs = planned_epochs(cfg, n)
    if epochs > cfg.epochs:
        logger.debug("{} samples: {} epochs to reach {} steps", n, epochs, cfg.min_steps)

    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            value = batch_loss(net, x[idx], y[idx], cfg.loss, Mode.train, rng)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, batch, value)
            optimizer.step(net.parameters(), net.gradients())
            total += value * len(idx)
        logger.debug("epoch {}/{} {} loss={:.6f}", epoch + 1, epochs, cfg.loss.value, total / n)
    return net
