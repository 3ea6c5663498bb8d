"""Datasets: IDX (Fashion-MNIST) and CIFAR binary loaders, plus synthetic blobs.

Official train and test files are pooled into a single :class:`Dataset`,
train records first; the partitioner does its own splitting.
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASET_NAMES = ("cifar10", "cifar100", "fmnist", "synthetic")
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "fmnist": 10}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_FILES = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                 "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
CIFAR100_FILES = ["train.bin", "test.bin"]
FMNIST_FILES = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
]

SYNTHETIC_SIGMA = 0.5


class DatasetError(Exception):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class RecordSizeError(DatasetError):
    pass


class MissingFileError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    num_classes: int
    features: np.ndarray  # (N, D), values in [0, 1]
    labels: np.ndarray  # (N,), int64

    def __post_init__(self) -> None:
        if self.name not in DATASET_NAMES:
            raise DatasetError(f"unknown dataset name {self.name!r}")
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DatasetError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise DatasetError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _resolve(path: Path) -> Path:
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gz
    raise MissingFileError(f"{path}: no such file")


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike,
             name: str = "fmnist", num_classes: int = 10) -> Dataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    features = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(name, num_classes, features, labels.astype(np.int64))


def load_fmnist(dir_path: str | os.PathLike) -> Dataset:
    root = Path(dir_path)
    parts = [load_idx(_resolve(root / img), _resolve(root / lab)) for img, lab in FMNIST_FILES]
    return Dataset(
        "fmnist", 10,
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )


def load_cifar(dir_path: str | os.PathLike, variant: str) -> Dataset:
    if variant == "cifar10":
        files, label_bytes, num_classes = CIFAR10_FILES, 1, 10
    elif variant == "cifar100":
        files, label_bytes, num_classes = CIFAR100_FILES, 2, 100
    else:
        raise DatasetError(f"unknown CIFAR variant {variant!r}")
    record = label_bytes + CIFAR_PIXELS
    root = Path(dir_path)
    feats, labs = [], []
    for fname in files:
        path = root / fname
        if not path.exists():
            raise MissingFileError(f"{path}: no such file")
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % record:
            raise RecordSizeError(f"{path}: size {len(raw)} is not a multiple of record size {record}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        # cifar100 records are (coarse, fine); keep the fine label
        labs.append(arr[:, label_bytes - 1].astype(np.int64))
        feats.append(arr[:, label_bytes:].astype(np.float32) / np.float32(255.0))
    return Dataset(variant, num_classes, np.concatenate(feats), np.concatenate(labs))


def _centroids(rng: np.random.Generator, num_classes: int, dim: int,
               max_tries: int = 1000, restarts: int = 20) -> np.ndarray:
    """Uniform centers in the unit cube, pairwise at least 2 sigma apart.

    A center that cannot be placed after ``max_tries`` draws starts the whole
    set over; when that keeps failing the last set is returned as is.
    """
    min_dist = 2 * SYNTHETIC_SIGMA
    centers: list[np.ndarray] = []
    for _ in range(restarts):
        centers = []
        for _ in range(num_classes):
            for _ in range(max_tries):
                c = rng.uniform(0.0, 1.0, size=dim)
                if all(np.linalg.norm(c - other) >= min_dist for other in centers):
                    break
            else:
                centers.append(c)
                break
            centers.append(c)
        else:
            return np.array(centers)
    log.debug("centroid separation not reached for dim=%d", dim)
    return np.array(centers)


def make_synthetic(num_classes: int, samples_per_class: int, feature_dim: int,
                   seed: int) -> Dataset:
    """Isotropic Gaussian blobs (sigma 0.5) clipped to [0, 1], one per class."""
    if min(num_classes, samples_per_class, feature_dim) <= 0:
        raise DatasetError("synthetic dataset sizes must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = _centroids(rng, num_classes, feature_dim)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    noise = rng.normal(0.0, SYNTHETIC_SIGMA, size=(len(labels), feature_dim))
    features = np.clip(centers[labels] + noise, 0.0, 1.0)
    return Dataset("synthetic", num_classes, features, labels)


def load_dataset(name: str, data_dir: str | os.PathLike | None = None, **synthetic) -> Dataset:
    """Load a dataset by name. Real datasets live under ``<data_dir>/<name>/``."""
    if name == "synthetic":
        return make_synthetic(
            synthetic.get("num_classes", 4),
            synthetic.get("samples_per_class", 500),
            synthetic.get("feature_dim", 32),
            synthetic.get("seed", 0),
        )
    if data_dir is None:
        data_dir = os.environ.get("FH_DATA_DIR")
    if data_dir is None:
        raise MissingFileError(f"no data directory given for dataset {name!r} (use --data-dir or FH_DATA_DIR)")
    root = Path(data_dir) / name
    if name == "fmnist":
        return load_fmnist(root)
    if name in ("cifar10", "cifar100"):
        return load_cifar(root, name)
    raise DatasetError(f"unknown dataset {name!r}")
