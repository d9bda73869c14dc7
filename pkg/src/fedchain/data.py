"""Datasets: IDX (MNIST / Fashion-MNIST) loading, synthetic blobs, splits and perturbations."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError, PartitionError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CLASS_COUNT = 10


@dataclass
class Dataset:
    """Feature rows scaled to [0, 1] plus integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __iter__(self):
        # lets a Dataset stand in for an (x, y) pair
        return iter((self.features, self.labels))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])

    def class_counts(self, class_count: int = CLASS_COUNT) -> np.ndarray:
        return np.bincount(self.labels, minlength=class_count)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path) -> Dataset:
    img = _read(images_path)
    lab = _read(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise FormatError("IDX header truncated")
    magic, count, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    lmagic, lcount = struct.unpack_from(">II", lab, 0)
    if lmagic != LABELS_MAGIC:
        raise FormatError(f"labels magic {lmagic:#010x}, expected {LABELS_MAGIC:#010x}")
    if count != lcount:
        raise FormatError(f"{count} images but {lcount} labels")
    if len(img) != 16 + count * rows * cols:
        raise FormatError(f"image data has {len(img) - 16} bytes, header promises {count * rows * cols}")
    if len(lab) != 8 + count:
        raise FormatError(f"label data has {len(lab) - 8} bytes, header promises {count}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8)
    return Dataset(pixels / 255.0, labels.astype(np.int64))


def write_idx(ds: Dataset, images_path, labels_path, rows: int = 28, cols: int = 28) -> None:
    """Write ``ds`` as IDX files (pixels quantised to bytes); used for fixtures."""
    n = len(ds)
    if ds.dim != rows * cols:
        raise ConfigError(f"feature dim {ds.dim} != {rows}x{cols}")
    pixels = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def load_mnist_dir(directory, train: bool = True) -> Dataset:
    """Load the standard file names (``train-*`` / ``t10k-*``, optionally gzipped)."""
    directory = Path(directory)
    prefix = "train" if train else "t10k"
    for suffix in ("", ".gz"):
        images = directory / f"{prefix}-images-idx3-ubyte{suffix}"
        labels = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return load_idx(images, labels)
    raise FileNotFoundError(f"no {prefix} IDX files in {directory}")


def synth_dataset(n: int, class_count: int, dim: int, seed: int, *, spread: float = 0.1,
                  separation: float = 8.0) -> Dataset:
    """Gaussian blobs, one per class, with labels assigned round-robin.

    Class ``c`` is centred at ``0.3 + a * e_c`` so any two centres lie
    ``separation * spread`` apart; centres do not depend on ``seed``, so
    separately seeded train and test draws share one distribution.
    """
    if class_count < 2 or dim < class_count:
        raise ConfigError(f"need 2 <= class_count <= dim, got {class_count} classes in {dim} dims")
    if n < class_count:
        raise ConfigError(f"n={n} is smaller than class_count={class_count}")
    if spread <= 0 or separation <= 0:
        raise ConfigError("spread and separation must be positive")
    rng = np.random.default_rng(seed)
    offset = separation * spread / math.sqrt(2.0)
    centres = np.full((class_count, dim), 0.3)
    centres[np.arange(class_count), np.arange(class_count)] += offset
    labels = rng.permutation(np.arange(n) % class_count)
    features = centres[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(np.clip(features, 0.0, 1.0), labels)


@dataclass
class PartitionPlan:
    mode: str = "iid"                  # "iid" or "noniid"
    genesis_size: int = 10_000
    client_sizes: list[int] = field(default_factory=list)
    classes_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        self.mode = self.mode.lower().replace("-", "").replace("_", "")
        if self.mode not in ("iid", "noniid"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if self.genesis_size < 0 or any(s < 0 for s in self.client_sizes):
            raise ConfigError("sizes must be non-negative")
        if self.classes_per_client < 1:
            raise ConfigError("classes_per_client must be positive")

    def client_classes(self, k: int, class_count: int = CLASS_COUNT) -> list[int]:
        """Non-IID mapping: client k holds classes {2k, 2k+1} (mod class_count)."""
        c = self.classes_per_client
        return [(c * k + j) % class_count for j in range(c)]


def _quotas(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def partition_indices(ds: Dataset, plan: PartitionPlan, class_count: int = CLASS_COUNT
                      ) -> tuple[np.ndarray, list[np.ndarray]]:
    rng = np.random.default_rng(plan.seed)
    pools = {c: list(rng.permutation(np.flatnonzero(ds.labels == c))) for c in range(class_count)}

    def take(c: int, count: int) -> list[int]:
        if len(pools[c]) < count:
            raise PartitionError(f"class {c}: need {count} samples, {len(pools[c])} left")
        out, pools[c] = pools[c][:count], pools[c][count:]
        return out

    genesis = []
    for c, q in enumerate(_quotas(plan.genesis_size, class_count)):
        genesis += take(c, q)
    clients = []
    if plan.mode == "iid":
        rest = np.array(sorted(i for pool in pools.values() for i in pool), dtype=np.int64)
        rest = rng.permutation(rest)
        if sum(plan.client_sizes) > rest.size:
            raise PartitionError(f"clients need {sum(plan.client_sizes)} samples, {rest.size} left")
        start = 0
        for size in plan.client_sizes:
            clients.append(np.sort(rest[start:start + size]))
            start += size
    else:
        for k, size in enumerate(plan.client_sizes):
            classes = plan.client_classes(k, class_count)
            idx = []
            for c, q in zip(classes, _quotas(size, len(classes))):
                idx += take(c, q)
            clients.append(np.sort(np.array(idx, dtype=np.int64)))
    return np.sort(np.array(genesis, dtype=np.int64)), clients


def partition(ds: Dataset, plan: PartitionPlan, class_count: int = CLASS_COUNT
              ) -> tuple[Dataset, list[Dataset]]:
    genesis, clients = partition_indices(ds, plan, class_count)
    return ds.subset(genesis), [ds.subset(idx) for idx in clients]


def add_gaussian_noise(ds: Dataset, sigma: float, seed: int) -> Dataset:
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return Dataset(ds.features.copy(), ds.labels.copy())
    rng = np.random.default_rng(seed)
    noisy = np.clip(ds.features + rng.normal(0.0, sigma, size=ds.features.shape), 0.0, 1.0)
    return Dataset(noisy, ds.labels.copy())


def subsample(ds: Dataset, fraction_or_count: Union[int, float], seed: int) -> Dataset:
    """Uniform draw without replacement; a float is a fraction (floored), an int a count."""
    n = len(ds)
    if isinstance(fraction_or_count, (int, np.integer)) and not isinstance(fraction_or_count, bool):
        count = int(fraction_or_count)
    else:
        frac = float(fraction_or_count)
        if not 0.0 <= frac <= 1.0:
            raise ConfigError(f"fraction {frac} outside [0, 1]")
        count = math.floor(frac * n + 1e-9)
    if count < 0 or count > n:
        raise ConfigError(f"cannot draw {count} samples from a pool of {n}")
    idx = np.random.default_rng(seed).permutation(n)[:count]
    return ds.subset(idx)
