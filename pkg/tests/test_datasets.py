import struct

import numpy as np
import pytest
from sklearn.datasets import make_moons

from uqbench.datasets import (
    CIFAR_RECORD,
    CifarFormatError,
    DatasetError,
    IdxFormatError,
    InsufficientSamplesError,
    load_cifar10_binary,
    load_idx,
    load_named,
    make_toy_regression,
    make_two_moons,
    subsample_per_class,
    toy_noise_std,
    toy_regression_grid,
    two_moons_ood,
)
from uqbench.schemas import LabeledDataset


def idx_bytes(array: np.ndarray) -> bytes:
    magic = {1: 0x801, 3: 0x803, 4: 0x804}[array.ndim]
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.astype(np.uint8).tobytes()


@pytest.fixture
def tiny_idx(tmp_path):
    images = np.arange(3 * 2 * 2, dtype=np.uint8).reshape(3, 2, 2) * 20
    labels = np.array([0, 2, 1], dtype=np.uint8)
    (tmp_path / "images").write_bytes(idx_bytes(images))
    (tmp_path / "labels").write_bytes(idx_bytes(labels))
    return tmp_path / "images", tmp_path / "labels", images, labels


def test_noiseless_grid_moons_match_sklearn():
    ours = make_two_moons(50, noise_std=0.0, grid=True)
    features, labels = make_moons(n_samples=100, shuffle=False, noise=None)
    np.testing.assert_allclose(ours.features, features, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(ours.labels, labels)


def test_moons_lie_on_their_arcs():
    data = make_two_moons(100, noise_std=0.0, seed=5)
    outer, inner = data.features[data.labels == 0], data.features[data.labels == 1]
    np.testing.assert_allclose(np.hypot(*outer.T), 1.0)
    np.testing.assert_allclose(np.hypot(inner[:, 0] - 1.0, inner[:, 1] - 0.5), 1.0)
    assert (outer[:, 1] >= 0).all() and (inner[:, 1] <= 0.5).all()


def test_moons_are_seeded():
    a, b = make_two_moons(20, seed=3), make_two_moons(20, seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, make_two_moons(20, seed=4).features)


def test_moons_reject_bad_arguments():
    with pytest.raises(DatasetError):
        make_two_moons(0)
    with pytest.raises(DatasetError):
        make_two_moons(5, noise_std=-1.0)


def test_ood_points_avoid_the_data_region():
    ood = two_moons_ood(500, seed=0)
    x, y = ood.features.T
    assert len(ood) == 500
    assert not ((x > -1.5) & (x < 2.5) & (y > -1.0) & (y < 1.5)).any()


def test_toy_regression():
    data = make_toy_regression(50, seed=0)
    assert data.features.shape == (50, 1)
    assert data.features[0, 0] == -4.0 and data.features[-1, 0] == 4.0
    residual = data.labels - np.sin(data.features[:, 0])
    assert (np.abs(residual) < 5 * toy_noise_std(data.features[:, 0])).all()
    assert toy_noise_std(np.array([0.0]))[0] == pytest.approx(0.075)


def test_toy_regression_noise_follows_the_sigmoid_profile():
    data = make_toy_regression(40_000, seed=3)
    x = data.features[:, 0]
    residual = data.labels - np.sin(x)
    for lo in np.arange(-4.0, 4.0, 0.5):
        members = (x >= lo) & (x < lo + 0.5)
        expected = np.sqrt(np.mean(toy_noise_std(x[members]) ** 2))
        assert residual[members].std() == pytest.approx(expected, rel=0.06)


def test_regression_grid():
    grid = toy_regression_grid(200)
    assert grid.shape == (200, 1)
    assert grid[0, 0] == -7.0 and grid[-1, 0] == 7.0


def test_load_idx(tiny_idx):
    images_path, labels_path, images, labels = tiny_idx
    data = load_idx(images_path, labels_path, n_classes=3)
    assert data.features.shape == (3, 1, 2, 2)
    np.testing.assert_allclose(data.features[:, 0], images / 255.0)
    np.testing.assert_array_equal(data.labels, labels)


def test_load_4d_idx(tmp_path):
    images = np.full((2, 3, 4, 4), 255, dtype=np.uint8)
    (tmp_path / "images").write_bytes(idx_bytes(images))
    (tmp_path / "labels").write_bytes(idx_bytes(np.array([1, 9], dtype=np.uint8)))
    data = load_idx(tmp_path / "images", tmp_path / "labels")
    assert data.features.shape == (2, 3, 4, 4)
    assert data.features.max() == 1.0


def test_idx_bad_magic(tiny_idx, tmp_path):
    images_path, labels_path, *_ = tiny_idx
    images_path.write_bytes(b"\x00\x00\x09\x99" + images_path.read_bytes()[4:])
    with pytest.raises(IdxFormatError):
        load_idx(images_path, labels_path)


def test_idx_truncated(tiny_idx):
    images_path, labels_path, *_ = tiny_idx
    images_path.write_bytes(images_path.read_bytes()[:-1])
    with pytest.raises(IdxFormatError):
        load_idx(images_path, labels_path)


def test_idx_count_mismatch(tiny_idx):
    images_path, labels_path, *_ = tiny_idx
    labels_path.write_bytes(idx_bytes(np.array([0, 1], dtype=np.uint8)))
    with pytest.raises(IdxFormatError):
        load_idx(images_path, labels_path)


def test_idx_label_out_of_range(tiny_idx):
    images_path, labels_path, *_ = tiny_idx
    with pytest.raises(IdxFormatError):
        load_idx(images_path, labels_path, n_classes=2)


def cifar_record(label: int, value: int) -> bytes:
    return bytes([label]) + bytes([value]) * (CIFAR_RECORD - 1)


def test_load_cifar10_binary(tmp_path):
    (tmp_path / "a.bin").write_bytes(cifar_record(3, 255) + cifar_record(7, 0))
    (tmp_path / "b.bin").write_bytes(cifar_record(1, 51))
    data = load_cifar10_binary([tmp_path / "a.bin", tmp_path / "b.bin"])
    assert data.features.shape == (3, 3, 32, 32)
    np.testing.assert_array_equal(data.labels, [3, 7, 1])
    assert data.features[0].min() == 1.0 and data.features[1].max() == 0.0
    assert data.features[2, 0, 0, 0] == pytest.approx(0.2)


def test_cifar_channel_major_layout(tmp_path):
    pixels = np.zeros(3 * 32 * 32, dtype=np.uint8)
    pixels[1024:2048] = 255  # green plane
    (tmp_path / "g.bin").write_bytes(bytes([0]) + pixels.tobytes())
    data = load_cifar10_binary([tmp_path / "g.bin"])
    assert data.features[0, 1].min() == 1.0
    assert data.features[0, 0].max() == 0.0 and data.features[0, 2].max() == 0.0


def test_cifar_bad_size(tmp_path):
    (tmp_path / "bad.bin").write_bytes(cifar_record(0, 0)[:-1])
    with pytest.raises(CifarFormatError):
        load_cifar10_binary([tmp_path / "bad.bin"])


def test_load_named_reads_conventional_files(tmp_path):
    images = np.zeros((4, 2, 2), dtype=np.uint8)
    labels = np.array([0, 1, 2, 3], dtype=np.uint8)
    root = tmp_path / "fashion_mnist"
    root.mkdir()
    (root / "t10k-images-idx3-ubyte").write_bytes(idx_bytes(images))
    (root / "t10k-labels-idx1-ubyte").write_bytes(idx_bytes(labels))
    data = load_named("fashion_mnist", "test", tmp_path)
    assert len(data) == 4
    assert data.name == "fashion_mnist-test"


def test_load_named_missing_files(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_named("cifar10", "train", tmp_path)


def labelled(labels: list[int], n_classes: int = 3) -> LabeledDataset:
    return LabeledDataset(features=np.arange(len(labels), dtype=float)[:, None], labels=np.array(labels), n_classes=n_classes)


def test_subsample_takes_exactly_spc_per_class():
    data = labelled([0, 1, 2] * 10)
    subset = subsample_per_class(data, 4, seed=0)
    assert np.bincount(subset.labels).tolist() == [4, 4, 4]
    assert len(np.unique(subset.features)) == 12
    np.testing.assert_array_equal(data.labels[subset.features[:, 0].astype(int)], subset.labels)


def test_subsample_is_seeded():
    data = labelled([0, 1, 2] * 10)
    a, b = subsample_per_class(data, 2, seed=1), subsample_per_class(data, 2, seed=1)
    np.testing.assert_array_equal(a.features, b.features)


def test_subsample_every_sample_of_a_class():
    data = labelled([0, 0, 1, 1, 2, 2])
    assert sorted(subsample_per_class(data, 2, seed=0).features[:, 0]) == [0, 1, 2, 3, 4, 5]


def test_subsample_insufficient_samples():
    with pytest.raises(InsufficientSamplesError) as info:
        subsample_per_class(labelled([0, 0, 0, 1, 2, 2]), 2, seed=0)
    assert (info.value.class_index, info.value.available, info.value.requested) == (1, 1, 2)
