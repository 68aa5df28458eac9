import numpy as np
from loguru import logger

from ..nn.model import Network, build
from ..nn.train import train
from ..schemas import LabeledDataset, Method, ModelSpec, Mode, PredictionSet, Tensor, TrainConfig


def member_seeds(seed: int, n_members: int) -> list[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n_members)]


def train_ensemble(spec: ModelSpec, data: LabeledDataset, cfg: TrainConfig, n_members: int) -> list[Network]:
    """Train ``n_members`` networks that differ only by seed (initialisation and shuffling)."""
    if n_members < 1:
        raise ValueError(f"an ensemble needs at least one member, got {n_members}")
    members = []
    for i, seed in enumerate(member_seeds(cfg.seed, n_members)):
        logger.debug("training ensemble member {}/{} (seed {})", i + 1, n_members, seed)
        member_cfg = cfg.model_copy(update={"seed": seed})
        members.append(train(build(spec, seed), data, member_cfg))
    return members


def predict_ensemble(models: list[Network], x: Tensor) -> PredictionSet:
    probs = sum(model.forward(x, Mode.eval) for model in models) / len(models)
    return PredictionSet(method=Method.deepensemble, probs=probs)
