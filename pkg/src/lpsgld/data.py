"""Datasets, the MNIST IDX reader/writer, synthetic data and minibatching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with integer labels.

    ``shift`` and ``scale`` record the normalisation applied to the raw features
    (``x = (raw - shift) / scale``).
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    shift: float = 0.0
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) and labels (n,)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> Dataset:
        return Dataset(
            self.features[index], self.labels[index], self.n_classes, self.shift, self.scale, self.name
        )


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">i", blob[:4])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic number {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}i", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) - header < size:
        raise ValueError(f"{path}: truncated payload, expected {size} bytes, found {len(blob) - header}")
    if len(blob) - header > size:
        raise ValueError(f"{path}: {len(blob) - header - size} trailing bytes after payload")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    header = struct.pack(">i", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}i", *array.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_mnist_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair, flatten images and scale pixels to [0, 1]."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected 3 image dimensions, found {images.ndim}")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected 1 label dimension, found {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), n_classes, 0.0, 255.0, "mnist")


def synth_classify(
    n: int, d: int, classes: int, separation: float, seed: int, *, stream_id: int = 0, scale: float = 1.0
) -> Dataset:
    """Class-conditional Gaussians ``scale * (separation * u_c + xi)``, ``xi ~ N(0, I)``.

    ``separation`` is measured in noise standard deviations and ``scale`` sets
    the overall feature magnitude.

    The ``u_c`` are random orthonormal directions when ``classes <= d`` and
    random unit vectors otherwise. Dense directions spread the label signal over
    every feature, so no single weight has to carry it. Labels cycle through the
    classes before shuffling, so class counts differ by at most one.
    """
    if min(n, d, classes) <= 0:
        raise ValueError("n, d and classes must be positive")
    if not scale > 0:
        raise ValueError("scale must be positive")
    rng = RngStream(seed, stream_id).generator()
    gauss = rng.standard_normal((d, classes))
    if classes <= d:
        basis, upper = np.linalg.qr(gauss)
        # sign fix makes the factorisation unique
        directions = (basis * np.where(np.diag(upper) < 0, -1.0, 1.0)).T
    else:
        directions = (gauss / np.linalg.norm(gauss, axis=0)).T
    labels = rng.permutation(np.arange(n) % classes)
    features = scale * (separation * directions[labels] + rng.standard_normal((n, d)))
    name = f"synth(d={d};sep={separation:g};scale={scale:g})"
    return Dataset(features, labels.astype(np.int64), classes, name=name)


def subsample(dataset: Dataset, size: int | None, seed: int, *, stream_id: int = 0) -> Dataset:
    """Uniform subset without replacement (order kept); ``None`` or ``>= n`` keeps everything."""
    if size is None or size >= len(dataset):
        return dataset
    if size <= 0:
        raise ValueError("subsample size must be positive")
    rng = RngStream(seed, stream_id).child("subsample").generator()
    index = np.sort(rng.choice(len(dataset), size=size, replace=False))
    return dataset.take(index)


@dataclass
class BatchIterator:
    """Shuffled passes over ``range(n)``; epoch ``e`` uses ``stream.child(e)``."""

    n: int
    batch_size: int
    stream: RngStream
    epoch: int = 0
    _order: np.ndarray = field(default=None, repr=False)
    _pos: int = 0

    def __post_init__(self):
        if self.n <= 0 or self.batch_size <= 0:
            raise ValueError("n and batch_size must be positive")
        self._order = self._permutation(self.epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        return self.stream.child(epoch).generator().permutation(self.n)

    def next_batch(self) -> np.ndarray:
        if self._pos >= self.n:
            self.epoch += 1
            self._order = self._permutation(self.epoch)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += batch.size
        return batch

    def batches_per_epoch(self) -> int:
        return -(-self.n // self.batch_size)
