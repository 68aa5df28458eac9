"""Synthetic generators, IDX / CIFAR-10 binary loaders and per-class sub-sampling."""

import struct
from collections.abc import Iterable
from pathlib import Path
from typing import Literal

import numpy as np
from loguru import logger
from scipy.special import expit

from .schemas import LabeledDataset, Tensor

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
IDX_IMAGES_4D = 0x00000804
CIFAR_RECORD = 1 + 3 * 32 * 32

TOY_RANGE = (-4.0, 4.0)
TOY_GRID_RANGE = (-7.0, 7.0)


class DatasetError(Exception):
    pass


class IdxFormatError(DatasetError):
    pass


class CifarFormatError(DatasetError):
    pass


class InsufficientSamplesError(DatasetError):
    def __init__(self, class_index: int, available: int, requested: int):
        self.class_index = class_index
        self.available = available
        self.requested = requested
        super().__init__(f"class {class_index} has {available} samples, {requested} requested")


# Synthetic data
def make_two_moons(n_per_class: int, noise_std: float = 0.1, seed: int = 0, grid: bool = False) -> LabeledDataset:
    """
    Two interleaving half circles; label 0 is the outer arc.

    With ``grid`` the arc parameter is equally spaced on [0, pi], otherwise
    it is drawn uniformly.
    """
    if n_per_class < 1:
        raise DatasetError(f"n_per_class must be at least 1, got {n_per_class}")
    if noise_std < 0:
        raise DatasetError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(seed)
    if grid:
        t_outer = t_inner = np.linspace(0.0, np.pi, n_per_class)
    else:
        t_outer = rng.uniform(0.0, np.pi, n_per_class)
        t_inner = rng.uniform(0.0, np.pi, n_per_class)
    outer = np.column_stack([np.cos(t_outer), np.sin(t_outer)])
    inner = np.column_stack([1.0 - np.cos(t_inner), 1.0 - np.sin(t_inner) - 0.5])
    features = np.vstack([outer, inner])
    if noise_std > 0:
        features = features + rng.normal(0.0, noise_std, size=features.shape)
    labels = np.repeat([0, 1], n_per_class)
    return LabeledDataset(features=features, labels=labels, n_classes=2, name="two_moons")


def two_moons_ood(n: int, seed: int = 0, margin: float = 3.0) -> LabeledDataset:
    """Uniform points over a wide box around the moons, keeping those off the data region."""
    rng = np.random.default_rng(seed)
    low = np.array([-1.0 - margin, -0.5 - margin])
    high = np.array([2.0 + margin, 1.0 + margin])
    points = np.empty((0, 2))
    while len(points) < n:
        batch = rng.uniform(low, high, size=(2 * n, 2))
        inside = (batch[:, 0] > -1.5) & (batch[:, 0] < 2.5) & (batch[:, 1] > -1.0) & (batch[:, 1] < 1.5)
        points = np.vstack([points, batch[~inside]])
    return LabeledDataset(features=points[:n], labels=np.zeros(n, dtype=np.int64), n_classes=2, name="two_moons_ood")


def toy_noise_std(x: Tensor) -> Tensor:
    return 0.15 * expit(x)


def make_toy_regression(n_samples: int, seed: int = 0) -> LabeledDataset:
    """y = sin(x) + N(0, sigma(x)^2) on n equally spaced x in [-4, 4]."""
    if n_samples < 2:
        raise DatasetError(f"the regression toy needs at least 2 samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    x = np.linspace(*TOY_RANGE, n_samples)
    y = np.sin(x) + rng.normal(size=n_samples) * toy_noise_std(x)
    return LabeledDataset(features=x[:, None], labels=y, name=f"toy_regression_{n_samples}")


def toy_regression_grid(resolution: int = 200) -> Tensor:
    return np.linspace(*TOY_GRID_RANGE, resolution)[:, None]


# Binary containers
def _read_idx(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES, IDX_IMAGES_4D):
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != expected:
        raise IdxFormatError(f"{path}: {len(data) - header} data bytes, header promises {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int = 10, name: str | None = None) -> LabeledDataset:
    """
    Load an IDX image/label pair as n x c x h x w floats in [0, 1].

    Raises:
        IdxFormatError: On a bad magic number, truncation or a count mismatch
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim not in (3, 4):
        raise IdxFormatError(f"{images_path}: expected an image container, got {images.ndim} dimensions")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a label container, got {labels.ndim} dimensions")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = images[:, None]
    features = images.astype(np.float64) / 255.0
    try:
        return LabeledDataset(
            features=features, labels=labels.astype(np.int64), n_classes=n_classes, name=name or Path(images_path).name
        )
    except ValueError as e:
        raise IdxFormatError(str(e)) from e


def load_cifar10_binary(paths: Iterable[str | Path], name: str = "cifar10") -> LabeledDataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 channel-major pixels per record)."""
    features, labels = [], []
    for path in paths:
        data = Path(path).read_bytes()
        if len(data) % CIFAR_RECORD:
            raise CifarFormatError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        features.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not labels:
        raise CifarFormatError("no CIFAR-10 batch files given")
    try:
        return LabeledDataset(features=np.concatenate(features), labels=np.concatenate(labels), n_classes=10, name=name)
    except ValueError as e:
        raise CifarFormatError(str(e)) from e


DatasetName = Literal["fashion_mnist", "mnist", "cifar10", "svhn"]
Split = Literal["train", "test"]


def dataset_paths(name: DatasetName, split: Split, data_dir: str | Path) -> list[Path]:
    """Conventional on-disk file names below ``data_dir/<name>/``."""
    root = Path(data_dir) / name
    match name:
        case "fashion_mnist" | "mnist":
            prefix = "train" if split == "train" else "t10k"
            return [root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte"]
        case "svhn":
            return [root / f"{split}-images-idx4-ubyte", root / f"{split}-labels-idx1-ubyte"]
        case "cifar10":
            if split == "train":
                return [root / f"data_batch_{i}.bin" for i in range(1, 6)]
            return [root / "test_batch.bin"]
    raise DatasetError(f"unknown dataset {name!r}")


def load_named(name: DatasetName, split: Split, data_dir: str | Path) -> LabeledDataset:
    paths = dataset_paths(name, split, data_dir)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DatasetError(f"{name} {split} files not found: {', '.join(missing)}")
    logger.info("loading {} {} from {}", name, split, paths[0].parent)
    if name == "cifar10":
        return load_cifar10_binary(paths, name=f"{name}-{split}")
    return load_idx(*paths, name=f"{name}-{split}")


def subsample_per_class(data: LabeledDataset, spc: int, seed: int) -> LabeledDataset:
    """
    Draw exactly ``spc`` samples of every class without replacement.

    Raises:
        InsufficientSamplesError: If a class has fewer than ``spc`` samples
    """
    if data.n_classes is None:
        raise DatasetError(f"{data.name} has no classes to sub-sample")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(data.n_classes):
        members = np.flatnonzero(data.labels == c)
        if len(members) < spc:
            raise InsufficientSamplesError(c, len(members), spc)
        chosen.append(rng.choice(members, size=spc, replace=False))
    return data.subset(np.concatenate(chosen), name=f"{data.name}-spc{spc}")
