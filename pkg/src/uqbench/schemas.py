import math
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Tensor = NDArray[np.float64]


class Mode(str, Enum):
    train = "train"
    eval = "eval"


class LayerKind(str, Enum):
    dense = "dense"
    conv2d_3x3 = "conv2d_3x3"
    maxpool_2x2 = "maxpool_2x2"
    batchnorm = "batchnorm"
    relu = "relu"
    softmax = "softmax"
    softplus = "softplus"
    dropout = "dropout"
    dropconnect = "dropconnect"
    flipout_dense = "flipout_dense"
    rbf_output = "rbf_output"


class LossKind(str, Enum):
    categorical_ce = "categorical_ce"
    binary_ce = "binary_ce"
    mse = "mse"
    gaussian_nll = "gaussian_nll"


class Method(str, Enum):
    baseline = "baseline"
    dropout = "dropout"
    dropconnect = "dropconnect"
    deepensemble = "deepensemble"
    duq = "duq"
    flipout = "flipout"
    gradient = "gradient"

    @property
    def short(self) -> str:
        return _METHOD_SHORT[self]


_METHOD_SHORT = {
    Method.baseline: "BL",
    Method.dropout: "DO",
    Method.dropconnect: "DC",
    Method.deepensemble: "DE",
    Method.duq: "DUQ",
    Method.flipout: "VI",
    Method.gradient: "GD",
}


class Aggregator(str, Enum):
    l1 = "l1_norm"
    l2 = "l2_norm"
    mean = "mean"
    std = "std"
    min = "min"
    max = "max"


class RegressionMethod(str, Enum):
    baseline_mse = "baseline-mse"
    ensemble_nll = "ensemble-nll"
    flipout = "flipout"
    flipout_nll = "flipout-nll"
    dropout = "dropout"
    dropconnect = "dropconnect"


class Orientation(str, Enum):
    higher_positive = "higher_positive"
    lower_positive = "lower_positive"


# Model and training configuration
class LayerSpec(BaseModel):
    kind: LayerKind
    units: int | None = Field(None, ge=1)
    filters: int | None = Field(None, ge=1)
    drop_prob: float = Field(0.0, ge=0.0, lt=1.0)
    stochastic_eval: bool = False
    length_scale: float = Field(0.1, gt=0.0)
    centroid_dim: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self) -> "LayerSpec":
        needs_units = {
            LayerKind.dense,
            LayerKind.dropconnect,
            LayerKind.flipout_dense,
            LayerKind.rbf_output,
        }
        if self.kind in needs_units and self.units is None:
            raise ValueError(f"{self.kind.value} layer needs 'units'")
        if self.kind is LayerKind.conv2d_3x3 and self.filters is None:
            raise ValueError("conv2d_3x3 layer needs 'filters'")
        return self


class ModelSpec(BaseModel):
    """Declarative network: a layer chain plus an optional variance head.

    The variance head branches from the input of the last main layer, which
    makes the last main layer the mean head of a two-headed regressor.
    """

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    n_classes: int | None = Field(None, ge=2)
    variance_head: list[LayerSpec] | None = None

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelSpec":
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        last = self.layers[-1].kind
        if self.n_classes is not None:
            if last not in (LayerKind.softmax, LayerKind.rbf_output):
                raise ValueError("a classifier must end in softmax or rbf_output")
            if self.variance_head is not None:
                raise ValueError("a classifier has no variance head")
        if self.variance_head is not None:
            if not self.variance_head or self.variance_head[-1].kind is not LayerKind.softplus:
                raise ValueError("the variance head must end in softplus")
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(64, ge=1)
    min_steps: int = Field(0, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(1e-7, gt=0.0)
    loss: LossKind = LossKind.categorical_ce
    seed: int = 0


class DuqConfig(BaseModel):
    length_scale: float = Field(0.1, gt=0.0)
    centroid_dim: int | None = Field(None, ge=1)


class GdConfig(BaseModel):
    aggregator: Aggregator = Aggregator.l1


class MethodConfig(BaseModel):
    method: Method
    mc_samples: int = Field(50, ge=1)
    drop_prob: float = Field(0.25, ge=0.0, lt=1.0)
    ensemble_size: int = Field(5, ge=1)
    duq: DuqConfig = Field(default_factory=DuqConfig)
    gd: GdConfig = Field(default_factory=GdConfig)


class SweepPlan(BaseModel):
    spc_values: list[int] = Field(default_factory=lambda: [1, 5, 10, 50, 100, 250, 500, 1000, 5000])
    trials: int = Field(5, ge=1)
    base_seed: int = 0

    @field_validator("spc_values")
    @classmethod
    def _strictly_increasing(cls, values: list[int]) -> list[int]:
        if not values:
            raise ValueError("at least one SPC value is required")
        if values[0] < 1 or any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"SPC values must be positive and strictly increasing: {values}")
        return values


# Data
class LabeledDataset(BaseModel):
    """Features plus integer class labels, or real targets when n_classes is None."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = Field(None, ge=1)
    name: str = "dataset"

    @model_validator(mode="after")
    def _check_labels(self) -> "LabeledDataset":
        if len(self.features) != len(self.labels):
            raise ValueError(
                f"{self.name}: {len(self.features)} samples but {len(self.labels)} labels"
            )
        if self.n_classes is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError(f"{self.name}: labels must lie in [0, {self.n_classes})")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            n_classes=self.n_classes,
            name=name or self.name,
        )


class SweepData(BaseModel):
    train: LabeledDataset
    test: LabeledDataset
    ood: LabeledDataset


# Predictions and metrics
class PredictionSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: Method
    probs: np.ndarray
    confidence: np.ndarray | None = None
    raw_score: np.ndarray | None = None
    kernels: np.ndarray | None = None

    @model_validator(mode="after")
    def _check_rows(self) -> "PredictionSet":
        if len(self.probs) and not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
            raise ValueError("probability rows must sum to 1")
        if (self.confidence is not None) != (self.method is Method.gradient):
            raise ValueError("confidence is present exactly for the gradient method")
        if (self.kernels is not None) != (self.method is Method.duq):
            raise ValueError("kernel values are present exactly for DUQ")
        return self

    def __len__(self) -> int:
        return len(self.probs)


class EceBin(BaseModel):
    lower: float
    upper: float
    mean_confidence: float
    accuracy: float
    count: int


class EceReport(BaseModel):
    ece: float = Field(ge=0.0, le=1.0)
    bins: list[EceBin]

    @model_validator(mode="after")
    def _check_total(self) -> "EceReport":
        total = sum(b.count for b in self.bins)
        if total:
            recomputed = sum(
                b.count / total * abs(b.accuracy - b.mean_confidence) for b in self.bins
            )
            if abs(recomputed - self.ece) > 1e-12:
                raise ValueError("ece does not match its bins")
        return self


class OodSuiteResult(BaseModel):
    test_vs_ood_entropy: float | None = None
    test_vs_ood_maxprob: float
    train_vs_ood_entropy: float | None = None
    train_vs_ood_maxprob: float
    train_vs_test_entropy: float | None = None
    train_vs_test_maxprob: float


def _unit_or_nan(value: float) -> bool:
    return math.isnan(value) or 0.0 <= value <= 1.0


class TrialResult(BaseModel):
    acc: float
    mean_entropy: float
    mean_maxprob: float
    train_ece: float
    ece: float
    ood_auc_entropy: float
    ood_auc_maxprob: float
    tr_test_auc_entropy: float
    tr_test_auc_maxprob: float
    tr_ood_auc_entropy: float
    tr_ood_auc_maxprob: float

    @model_validator(mode="after")
    def _check_ranges(self) -> "TrialResult":
        for name, value in self.model_dump().items():
            if name == "mean_entropy":
                continue
            if not _unit_or_nan(value):
                raise ValueError(f"{name}={value} outside [0, 1]")
        return self


class SweepRow(BaseModel):
    spc: int
    mean: TrialResult
    std: TrialResult


class RegressionCurve(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: RegressionMethod
    n_samples: int
    x: np.ndarray
    mean: np.ndarray
    aleatoric_var: np.ndarray | None = None
    epistemic_std: np.ndarray
