from typing import Literal

import numpy as np
from loguru import logger

from ..nn.model import Network, build, cnn_spec, mlp_spec, softmax_head
from ..nn.train import train
from ..schemas import (
    LabeledDataset,
    LayerKind,
    LayerSpec,
    LossKind,
    Method,
    MethodConfig,
    ModelSpec,
    PredictionSet,
    Tensor,
    TrainConfig,
)
from .baseline import predict_baseline
from .duq import predict_duq
from .ensemble import predict_ensemble, train_ensemble
from .gradient import gradient_prediction, gradient_to_confidence, gradient_uncertainty
from .mc import predict_mc

Architecture = Literal["cnn", "mlp"]


def method_head(cfg: MethodConfig, n_classes: int) -> list[LayerSpec]:
    """Output layers for one method; everything below them is the shared architecture."""
    match cfg.method:
        case Method.baseline | Method.deepensemble | Method.gradient:
            return softmax_head(n_classes)
        case Method.dropout:
            return [
                LayerSpec(kind=LayerKind.dropout, drop_prob=cfg.drop_prob, stochastic_eval=True),
                *softmax_head(n_classes),
            ]
        case Method.dropconnect:
            return [
                LayerSpec(kind=LayerKind.dropconnect, units=n_classes, drop_prob=cfg.drop_prob, stochastic_eval=True),
                LayerSpec(kind=LayerKind.softmax),
            ]
        case Method.flipout:
            return [
                LayerSpec(kind=LayerKind.flipout_dense, units=n_classes, stochastic_eval=True),
                LayerSpec(kind=LayerKind.softmax),
            ]
        case Method.duq:
            return [
                LayerSpec(
                    kind=LayerKind.rbf_output,
                    units=n_classes,
                    centroid_dim=cfg.duq.centroid_dim,
                    length_scale=cfg.duq.length_scale,
                )
            ]
    raise ValueError(f"unknown method {cfg.method}")


def method_spec(cfg: MethodConfig, architecture: Architecture, input_shape: tuple[int, ...], n_classes: int) -> ModelSpec:
    head = method_head(cfg, n_classes)
    if architecture == "cnn":
        return cnn_spec(input_shape, n_classes, head)
    return mlp_spec(input_shape, n_classes, head)


class Predictor:
    """Trained model(s) of one method plus the rule that turns them into predictions."""

    def __init__(self, cfg: MethodConfig, models: list[Network]):
        self.cfg = cfg
        self.models = models

    @property
    def method(self) -> Method:
        return self.cfg.method

    def _predict_chunk(self, x: Tensor, rng: np.random.Generator) -> PredictionSet:
        model = self.models[0]
        match self.cfg.method:
            case Method.baseline:
                return predict_baseline(model, x)
            case Method.dropout | Method.dropconnect | Method.flipout:
                return predict_mc(model, x, self.cfg.mc_samples, self.cfg.method.value, rng)
            case Method.deepensemble:
                return predict_ensemble(self.models, x)
            case Method.duq:
                return predict_duq(model, x)
        raise ValueError(f"no chunked prediction for {self.cfg.method}")

    def predict(self, x: Tensor, rng: np.random.Generator, batch_size: int = 256) -> PredictionSet:
        """
        Predict ``x`` in chunks of ``batch_size``; each chunk gets its own child stream.

        Gradient confidences are min-max normalised over the whole of ``x``.
        """
        if self.cfg.method is Method.gradient:
            scores, probs = gradient_uncertainty(self.models[0], x, self.cfg.gd.aggregator)
            (confidence,) = gradient_to_confidence(scores)
            return gradient_prediction(probs, scores, confidence)

        starts = range(0, len(x), batch_size)
        if not starts:
            raise ValueError("cannot predict an empty batch")
        parts = [self._predict_chunk(x[s : s + batch_size], child) for s, child in zip(starts, rng.spawn(len(starts)))]
        kernels = [p.kernels for p in parts if p.kernels is not None]
        return PredictionSet(
            method=self.cfg.method,
            probs=np.concatenate([p.probs for p in parts]),
            kernels=np.concatenate(kernels) if kernels else None,
        )


def fit_method(cfg: MethodConfig, spec: ModelSpec, data: LabeledDataset, train_cfg: TrainConfig) -> Predictor:
    """Train what ``cfg.method`` needs: one network, an ensemble, or a BCE-trained DUQ network."""
    logger.debug("fitting {} on {} samples", cfg.method.short, len(data))
    if cfg.method is Method.deepensemble:
        return Predictor(cfg, train_ensemble(spec, data, train_cfg, cfg.ensemble_size))
    loss = LossKind.binary_ce if cfg.method is Method.duq else LossKind.categorical_ce
    train_cfg = train_cfg.model_copy(update={"loss": loss})
    return Predictor(cfg, [train(build(spec, train_cfg.seed), data, train_cfg)])
