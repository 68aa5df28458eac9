from .layers import LayerShapeError, MissingForwardCacheError, NNError, build_layer
from .losses import LossInputError, loss_binary_ce, loss_categorical_ce, loss_gaussian_nll, loss_mse
from .model import Network, build, cnn_spec, mlp_spec, regression_spec
from .optim import Adam, adam_step
from .train import TrainingDivergedError, train
from .weights import WeightFormatError, load_weights, save_weights

__all__ = [
    "Adam",
    "LayerShapeError",
    "LossInputError",
    "MissingForwardCacheError",
    "NNError",
    "Network",
    "TrainingDivergedError",
    "WeightFormatError",
    "adam_step",
    "build",
    "build_layer",
    "cnn_spec",
    "load_weights",
    "loss_binary_ce",
    "loss_categorical_ce",
    "loss_gaussian_nll",
    "loss_mse",
    "mlp_spec",
    "regression_spec",
    "save_weights",
    "train",
]
