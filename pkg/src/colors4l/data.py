"""Dataset ingestion, label-budget splits and the paired batch streams.

Images are kept as uint8 ``N x H x W x C`` arrays at rest and converted to
float32 in [0, 1] only inside the training pipeline.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (32, 32, 3)
PIXELS = 32 * 32 * 3

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR100_TRAIN_RECORDS = 50000
CIFAR100_TEST_RECORDS = 10000

CONTAINER_MAGIC = b"CDS1"

NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "svhn": 10}
DATASETS = tuple(NUM_CLASSES)

# Stream tags mixed into per-step seeds so independent draws never share state.
STREAM_LABELED = 1
STREAM_UNLABELED = 2
STREAM_AUGMENT = 3
STREAM_PROXY = 4
STREAM_DROPOUT = 5


@dataclass
class LabeledSet:
    images: np.ndarray  # N x H x W x C, uint8
    labels: np.ndarray  # N, int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)


@dataclass
class DatasetSplit:
    """Labeled subset D_L, unlabeled pool D_U and the untouched test set."""

    labeled: LabeledSet
    unlabeled: np.ndarray
    test: LabeledSet
    num_classes: int
    seed: int
    labeled_indices: np.ndarray  # positions of D_L inside the train set


@dataclass
class BatchPair:
    labeled_images: object
    labels: object
    unlabeled_images: object


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator for one (seed, key...) cell of the deterministic sequence."""
    return np.random.default_rng([int(seed), *map(int, keys)])


# --------------------------------------------------------------------------
# CIFAR binary formats


def _read_records(path: Path, record_size: int, expected: int | None) -> np.ndarray:
    if not path.is_file():
        size = f"{expected * record_size} bytes" if expected else f"a multiple of {record_size} bytes"
        raise DataError(f"missing data file {path} (expected {size})")
    raw = np.fromfile(path, dtype=np.uint8)
    if expected is not None and raw.size != expected * record_size:
        raise DataError(
            f"{path}: file has {raw.size} bytes, expected {expected * record_size} "
            f"({expected} records of {record_size} bytes)"
        )
    if raw.size == 0 or raw.size % record_size:
        raise DataError(
            f"{path}: file has {raw.size} bytes, not a positive multiple of "
            f"the {record_size}-byte record size"
        )
    return raw.reshape(-1, record_size)


def _planar_to_hwc(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))


def _parse_cifar(records: np.ndarray, label_col: int, num_classes: int, path) -> LabeledSet:
    labels = records[:, label_col].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DataError(
            f"{path}: corrupt record {bad[0]}: label byte {labels[bad[0]]} "
            f"is not below {num_classes}"
        )
    pixel_start = records.shape[1] - PIXELS
    return LabeledSet(_planar_to_hwc(records[:, pixel_start:]), labels)


def _resolve_dir(path, subdir: str) -> Path:
    path = Path(path)
    if (path / subdir).is_dir():
        return path / subdir
    return path


def load_cifar10(path, records_per_file: int | None = CIFAR10_RECORDS_PER_FILE):
    """Read the official CIFAR-10 binary batches.

    ``path`` is the directory holding ``data_batch_{1..5}.bin`` and
    ``test_batch.bin`` (or its parent containing ``cifar-10-batches-bin``).
    Each record is one label byte followed by 3072 channel-planar pixel bytes.
    Pass ``records_per_file=None`` to accept any whole number of records.
    """
    root = _resolve_dir(path, "cifar-10-batches-bin")
    parts = []
    for name in CIFAR10_TRAIN_FILES:
        records = _read_records(root / name, 1 + PIXELS, records_per_file)
        parts.append(_parse_cifar(records, 0, 10, root / name))
    train = LabeledSet(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )
    records = _read_records(root / CIFAR10_TEST_FILE, 1 + PIXELS, records_per_file)
    test = _parse_cifar(records, 0, 10, root / CIFAR10_TEST_FILE)
    return train, test


def load_cifar100(path, strict: bool = True):
    """Read the official CIFAR-100 binary files ``train.bin``/``test.bin``.

    Records carry a coarse label byte, a fine label byte and 3072 pixels; only
    the fine label is kept.
    """
    root = _resolve_dir(path, "cifar-100-binary")
    out = []
    for name, expected in (("train.bin", CIFAR100_TRAIN_RECORDS), ("test.bin", CIFAR100_TEST_RECORDS)):
        records = _read_records(root / name, 2 + PIXELS, expected if strict else None)
        out.append(_parse_cifar(records, 1, 100, root / name))
    return out[0], out[1]


# --------------------------------------------------------------------------
# Portable container "CDS1"

_HEADER = struct.Struct("<4sIIIIB")


def write_container(path, images: np.ndarray, labels: np.ndarray | None = None) -> Path:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DataError("container images must be a uint8 N x H x W x C array")
    n, h, w, c = images.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CONTAINER_MAGIC, n, h, w, c, labels is not None))
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
                raise DataError("container labels must be N values in 0..255")
            fh.write(labels.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(images).tobytes())
    return path


def load_container(path):
    """Read a CDS1 container. Returns ``(images, labels)``; labels may be None."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing container {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: {len(data)} bytes is shorter than the {_HEADER.size}-byte header")
    magic, n, h, w, c, has_labels = _HEADER.unpack_from(data)
    if magic[:3] == b"CDS" and magic != CONTAINER_MAGIC:
        raise DataError(f"{path}: unknown container version {magic!r}")
    if magic != CONTAINER_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if has_labels not in (0, 1):
        raise DataError(f"{path}: has_labels flag must be 0 or 1, got {has_labels}")
    expected = _HEADER.size + n * has_labels + n * h * w * c
    if len(data) != expected:
        raise DataError(
            f"{path}: header declares N={n}, {h}x{w}x{c} ({expected} bytes) "
            f"but the file has {len(data)} bytes"
        )
    offset = _HEADER.size
    labels = None
    if has_labels:
        labels = np.frombuffer(data, np.uint8, n, offset).astype(np.int64)
        offset += n
    images = np.frombuffer(data, np.uint8, n * h * w * c, offset).reshape(n, h, w, c).copy()
    return images, labels


def load_labeled_container(path, num_classes: int) -> LabeledSet:
    images, labels = load_container(path)
    if labels is None:
        raise DataError(f"{path}: container has no labels")
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"{path}: label {labels.max()} is not below {num_classes}")
    return LabeledSet(images, labels)


def default_data_root() -> Path:
    return Path(os.environ.get("COLORS4L_DATA", "data"))


def load_dataset(name: str, root=None):
    """Load ``(train, test)`` for a named dataset under ``root``.

    Converted containers ``<root>/<name>/{train,test}.cds`` take precedence;
    otherwise the official CIFAR binaries are read. SVHN is only read from
    containers (see ``colors4l convert``).
    """
    if name not in NUM_CLASSES:
        raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    root = Path(root) if root is not None else default_data_root()
    base = root / name if (root / name).is_dir() else root
    k = NUM_CLASSES[name]
    if (base / "train.cds").is_file():
        return (load_labeled_container(base / "train.cds", k),
                load_labeled_container(base / "test.cds", k))
    if name == "cifar10":
        return load_cifar10(base)
    if name == "cifar100":
        return load_cifar100(base)
    raise DataError(f"no SVHN containers under {base}; run `colors4l convert --dataset svhn` first")


# --------------------------------------------------------------------------
# Splits and batch streams


def _balanced_quotas(counts: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    k = len(counts)
    quotas = np.full(k, budget // k)
    extra = rng.permutation(k)[: budget % k]
    quotas[extra] += 1
    # Classes too small for their quota hand the deficit to the others.
    while np.any(quotas > counts):
        deficit = int(np.sum(np.maximum(quotas - counts, 0)))
        quotas = np.minimum(quotas, counts)
        spare = np.flatnonzero(quotas < counts)
        order = spare[np.argsort(quotas[spare], kind="stable")]
        for i in range(deficit):
            quotas[order[i % len(order)]] += 1
    return quotas


def make_split(train: LabeledSet, budget: int, seed: int, test: LabeledSet | None = None,
               num_classes: int | None = None) -> DatasetSplit:
    """Draw a class-balanced labeled subset of size ``budget``.

    The unlabeled pool is the whole training set with labels dropped, so
    labeled images also feed the self-supervised branch.
    """
    n = len(train)
    if budget > n:
        raise ConfigError(f"label budget {budget} exceeds the {n} training examples")
    if budget < 1:
        raise ConfigError("label budget must be positive")
    k = num_classes or int(train.labels.max()) + 1
    rng = rng_for(seed, STREAM_LABELED, budget)
    counts = np.bincount(train.labels, minlength=k)
    quotas = _balanced_quotas(counts, budget, rng)
    chosen = []
    for cls in range(k):
        members = np.flatnonzero(train.labels == cls)
        chosen.append(rng.permutation(members)[: quotas[cls]])
    idx = np.sort(np.concatenate(chosen))
    if test is None:
        test = LabeledSet(np.zeros((0, *train.images.shape[1:]), np.uint8), np.zeros(0, np.int64))
    return DatasetSplit(
        labeled=LabeledSet(train.images[idx], train.labels[idx]),
        unlabeled=train.images,
        test=test,
        num_classes=k,
        seed=seed,
        labeled_indices=idx,
    )


def labeled_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Indices of the labeled batch at ``step``.

    The labeled stream is the concatenation of per-pass permutations of
    ``range(n)``; batch ``s`` covers stream positions ``[s*B, (s+1)*B)``.
    """
    start = step * batch
    first_pass, last_pass = start // n, (start + batch - 1) // n
    stream = np.concatenate(
        [rng_for(seed, STREAM_LABELED, p).permutation(n) for p in range(first_pass, last_pass + 1)]
    )
    offset = start - first_pass * n
    return stream[offset:offset + batch]


def labeled_cycler(split: DatasetSplit, batch: int, seed: int, start_step: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of ``(images, labels)`` batches of exactly ``batch``."""
    if batch < 1:
        raise ConfigError("batch size must be at least 1")
    n = len(split.labeled)
    if n == 0:
        raise DataError("cannot cycle an empty labeled set")
    step = start_step
    while True:
        idx = labeled_indices(n, batch, seed, step)
        yield split.labeled.images[idx], split.labeled.labels[idx]
        step += 1


def steps_per_epoch(num_unlabeled: int, batch: int) -> int:
    return -(-num_unlabeled // batch)


def unlabeled_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Indices of the unlabeled batch at global ``step``.

    Each epoch is one permutation of D_U. The final short batch of an epoch
    is topped up from the head of the same permutation to keep size ``batch``.
    """
    per_epoch = steps_per_epoch(n, batch)
    epoch, j = divmod(step, per_epoch)
    perm = rng_for(seed, STREAM_UNLABELED, epoch).permutation(n)
    return np.resize(perm, per_epoch * batch)[j * batch:(j + 1) * batch]


# --------------------------------------------------------------------------
# Pixel transforms


def to_float(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float32) / np.float32(255.0)


def channel_stats(images: np.ndarray, chunk: int = 5000) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of uint8 images on the [0, 1] scale."""
    c = images.shape[-1]
    total = np.zeros(c)
    total_sq = np.zeros(c)
    count = 0
    for i in range(0, len(images), chunk):
        block = images[i:i + chunk].reshape(-1, c).astype(np.float64) / 255.0
        total += block.sum(0)
        total_sq += (block ** 2).sum(0)
        count += block.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    return ((image - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def augment_labeled(image: np.ndarray, rng, allow_flip: bool = True, pad: int = 4) -> np.ndarray:
    """Reflect-pad by ``pad``, take a random crop of the original size and
    (when ``allow_flip``) mirror left-right with probability 1/2."""
    h, w = image.shape[:2]
    dy, dx = rng.integers(-pad, pad + 1, size=2)
    flip = allow_flip and rng.random() < 0.5
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = padded[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def allows_flip(dataset: str) -> bool:
    # Mirrored digits change identity.
    return dataset != "svhn"
