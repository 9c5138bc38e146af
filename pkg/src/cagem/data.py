"""Dataset ingestion, dynamic binarization and labelled-subset construction.

MNIST is read from the standard IDX containers (big-endian header, magic
0x803 for image tensors and 0x801 for label vectors). OMNIGLOT is read from
an .npz container holding flattened 28x28 images with alphabet ids as labels
(keys: train_images, train_labels, test_images, test_labels).

A deterministic synthetic clustered-image dataset is available under the name
"synthetic" so the full pipeline can run where the benchmark files are not
present.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, DataFormatError, DimensionError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
MNIST_VALID_SIZE = 10000
OMNIGLOT_VALID_FRACTION = 0.1
SYNTHETIC_SIZES = {"train": 12000, "valid": 2000, "test": 2000}


@dataclass
class Dataset:
    images: np.ndarray          # [N, 784] float32 in [0, 1]
    labels: Optional[np.ndarray]  # int64 class or alphabet ids
    split: str                  # "train" | "valid" | "test"

    def __post_init__(self):
        if self.images.ndim != 2:
            raise DataFormatError("images must be a [N, D] matrix")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataFormatError("pixel intensities must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataFormatError("label count does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def x_dim(self) -> int:
        return self.images.shape[1]

    @property
    def n_classes(self) -> int:
        if self.labels is None:
            raise ConfigError(f"split {self.split!r} carries no labels")
        return int(self.labels.max()) + 1


@dataclass
class LabelledSubset:
    indices: np.ndarray
    per_class_counts: dict


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX ubyte container (image tensor or label vector)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_len)
    if body.size != expected:
        raise DataFormatError(
            f"{path}: payload of {body.size} bytes at offset {header_len}, "
            f"expected {expected} from dims {dims}"
        )
    return body.reshape(dims).copy()


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array back to an IDX container (1-d labels or 3-d images)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 1:
        magic = IDX_MAGIC_LABELS
    elif array.ndim == 3:
        magic = IDX_MAGIC_IMAGES
    else:
        raise DataFormatError("write_idx supports 1-d labels or 3-d image stacks")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing MNIST file {stem}[.gz] under {directory}")


def load_mnist(directory) -> dict:
    directory = Path(directory)
    images = read_idx(_find_idx(directory, MNIST_FILES["train_images"]))
    labels = read_idx(_find_idx(directory, MNIST_FILES["train_labels"]))
    test_images = read_idx(_find_idx(directory, MNIST_FILES["test_images"]))
    test_labels = read_idx(_find_idx(directory, MNIST_FILES["test_labels"]))
    flat = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    test_flat = test_images.reshape(test_images.shape[0], -1).astype(np.float32) / 255.0
    cut = flat.shape[0] - MNIST_VALID_SIZE
    return {
        "train": Dataset(flat[:cut], labels[:cut].astype(np.int64), "train"),
        "valid": Dataset(flat[cut:], labels[cut:].astype(np.int64), "valid"),
        "test": Dataset(test_flat, test_labels.astype(np.int64), "test"),
    }


def load_omniglot(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "omniglot.npz"
    if not path.exists():
        raise FileNotFoundError(f"OMNIGLOT container not found: {path}")
    with np.load(path) as archive:
        try:
            images = archive["train_images"]
            labels = archive["train_labels"]
            test_images = archive["test_images"]
            test_labels = archive["test_labels"]
        except KeyError as exc:
            raise DataFormatError(f"{path}: missing array {exc}") from exc
    images = images.reshape(images.shape[0], -1).astype(np.float32)
    test_images = test_images.reshape(test_images.shape[0], -1).astype(np.float32)
    if images.max() > 1:
        images = images / 255.0
        test_images = test_images / 255.0
    cut = images.shape[0] - int(round(OMNIGLOT_VALID_FRACTION * images.shape[0]))
    return {
        "train": Dataset(images[:cut], labels[:cut].astype(np.int64), "train"),
        "valid": Dataset(images[cut:], labels[cut:].astype(np.int64), "valid"),
        "test": Dataset(test_images, test_labels.astype(np.int64), "test"),
    }


def save_omniglot(path, splits: dict) -> None:
    """Write train/test arrays back to the .npz container (round-trip support)."""
    np.savez(
        path,
        train_images=splits["train_images"], train_labels=splits["train_labels"],
        test_images=splits["test_images"], test_labels=splits["test_labels"],
    )


def make_synthetic(split: str, n: int, seed: int = 0, n_classes: int = 10,
                   side: int = 28, jitter: float = 3.0) -> Dataset:
    """Deterministic clustered grayscale blobs, one blob layout per class.

    Each class has a fixed triple of blob centers; examples jitter the centers
    and the intensity. The default jitter makes classes overlap visually, so
    cluster membership is informative but not trivially separable.
    """
    split_offset = {"train": 0, "valid": 1, "test": 2}[split]
    rng = np.random.default_rng(seed * 1000 + split_offset)
    margin = max(1, side // 7)  # keeps blob centers off the border
    proto = np.random.default_rng(seed).uniform(margin, side - margin,
                                                size=(n_classes, 3, 2))
    yy, xx = np.mgrid[0:side, 0:side]
    labels = rng.integers(0, n_classes, size=n)
    images = np.zeros((n, side * side), dtype=np.float32)
    for i, c in enumerate(labels):
        centers = proto[c] + rng.normal(0, jitter, size=(3, 2))
        scale = rng.uniform(0.6, 1.0)
        img = np.zeros((side, side))
        for cy, cx in centers:
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 2.5 ** 2))
        img = np.clip(scale * img, 0.0, 1.0)
        images[i] = img.reshape(-1).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), split)


def load_synthetic(seed: int = 0, sizes: Optional[dict] = None) -> dict:
    sizes = sizes or SYNTHETIC_SIZES
    return {split: make_synthetic(split, n, seed=seed) for split, n in sizes.items()}


def load_dataset(name: str, path=None, **kwargs) -> dict:
    """Returns {"train","valid","test"} Dataset triplet for a named dataset."""
    if name == "mnist":
        if path is None:
            raise ConfigError("mnist requires a data directory")
        return load_mnist(path)
    if name == "omniglot":
        if path is None:
            raise ConfigError("omniglot requires a data path")
        return load_omniglot(path)
    if name == "synthetic":
        return load_synthetic(**kwargs)
    raise ConfigError(f"unknown dataset {name!r}")


def binarize(batch: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
    """Dynamic binarization: each pixel ~ Bernoulli(intensity), fresh per visit."""
    batch = torch.as_tensor(batch, dtype=torch.float64)
    if batch.min() < 0 or batch.max() > 1:
        raise DimensionError("binarize expects intensities in [0, 1]")
    return torch.bernoulli(batch, generator=generator)


def draw_labelled_subset(dataset: Dataset, n_labels: int, seed: int) -> LabelledSubset:
    """Evenly-per-class labelled indices, uniform without replacement per seed."""
    if dataset.labels is None:
        raise ConfigError("cannot draw a labelled subset from unlabelled data")
    n_classes = dataset.n_classes
    if n_labels % n_classes != 0:
        raise ConfigError(
            f"n_labels={n_labels} not divisible by {n_classes} classes")
    per_class = n_labels // n_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(n_classes):
        pool = np.flatnonzero(dataset.labels == c)
        if pool.size < per_class:
            raise ConfigError(
                f"class {c} has only {pool.size} examples, need {per_class}")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    indices = np.sort(np.concatenate(chosen))
    return LabelledSubset(indices=indices,
                          per_class_counts={c: per_class for c in range(n_classes)})
