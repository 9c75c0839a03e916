"""Datasets: CIFAR-10 binary batches, a synthetic stand-in, splits and augmentation."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_BATCH = 10000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)

SYNTH_MAGIC = b"BARSDATA"
SYNTH_VERSION = 1


@dataclass
class Dataset:
    """Images [N, 3, H, W] in [0, 1] (float32) and integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    indices: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"dataset: images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size == 0:
            raise ValueError("dataset: no samples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"dataset: labels must lie in [0, {self.num_classes})")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.indices[idx])


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def read_cifar_batch(path, expected_records=None):
    """Parse one binary batch file: 1 label byte then 3072 channel-planar pixels per record."""
    if not os.path.isfile(path):
        expect = f"{expected_records * RECORD_BYTES} bytes" if expected_records else f"a multiple of {RECORD_BYTES} bytes"
        raise FileNotFoundError(f"{path}: file missing (expected {expect})")
    size = os.path.getsize(path)
    if expected_records is not None and size != expected_records * RECORD_BYTES:
        raise ValueError(f"{path}: {size} bytes, expected {expected_records * RECORD_BYTES}")
    if size == 0 or size % RECORD_BYTES:
        raise ValueError(f"{path}: {size} bytes is not a positive multiple of the {RECORD_BYTES}-byte record size")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, train=True):
    """Load the standard CIFAR-10 binary batches from ``directory``."""
    files = TRAIN_FILES if train else TEST_FILES
    parts = [read_cifar_batch(os.path.join(directory, f), RECORDS_PER_BATCH) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images.astype(np.float32) / 255.0, labels, 10)


def write_cifar_batch(path, images_u8, labels):
    """Write records in the CIFAR binary layout (used for fixtures and subsets)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    rec.tofile(path)


def normalize(images, mean=CIFAR_MEAN, std=CIFAR_STD):
    """Per-channel standardization with fixed constants."""
    shp = (1, -1, 1, 1)
    return ((images - mean.reshape(shp)) / std.reshape(shp)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _class_patterns(rng, classes, size):
    # low-frequency colour patterns: 4x4 random grids upsampled to full size
    coarse = rng.uniform(0.15, 0.85, size=(classes, 3, 4, 4))
    return np.repeat(np.repeat(coarse, size // 4, axis=2), size // 4, axis=3)


def synthetic_dataset(seed=0, n=1000, classes=10, size=32, noise=0.12, cache=None):
    """Balanced class-conditional blob images (per-class mean pattern plus noise).

    Pixels are quantized to bytes so a fixed seed yields identical data on any
    platform.  With ``cache`` set, the dataset is read from (or written to) a
    flat binary file with a small header.
    """
    if n < classes:
        raise ValueError(f"synthetic_dataset: n={n} must be at least classes={classes}")
    if size % 4:
        raise ValueError("synthetic_dataset: size must be a multiple of 4")
    if cache is not None and os.path.isfile(cache):
        ds = read_synthetic(cache)
        if len(ds) == n and ds.num_classes == classes and ds.images.shape[2] == size:
            return ds
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(rng, classes, size)
    labels = np.tile(np.arange(classes), -(-n // classes))[:n]
    labels = labels[rng.permutation(n)]
    shift = rng.uniform(-0.1, 0.1, size=(n, 1, 1, 1))
    x = patterns[labels] + shift + noise * rng.standard_normal((n, 3, size, size))
    u8 = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    ds = Dataset(u8.astype(np.float32) / 255.0, labels, classes)
    if cache is not None:
        write_synthetic(cache, u8, labels, classes)
    return ds


def write_synthetic(path, images_u8, labels, classes):
    n, c, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC)
        fh.write(struct.pack("<6I", SYNTH_VERSION, n, c, h, w, classes))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def read_synthetic(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(SYNTH_MAGIC) + 24
    if blob[: len(SYNTH_MAGIC)] != SYNTH_MAGIC:
        raise ValueError(f"{path}: not a synthetic dataset file")
    version, n, c, h, w, classes = struct.unpack("<6I", blob[len(SYNTH_MAGIC) : head])
    if version != SYNTH_VERSION:
        raise ValueError(f"{path}: unsupported synthetic dataset version {version}")
    expected = head + n + n * c * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: {len(blob)} bytes, expected {expected}")
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=head).astype(np.int64)
    u8 = np.frombuffer(blob, dtype=np.uint8, offset=head + n).reshape(n, c, h, w)
    return Dataset(u8.astype(np.float32) / 255.0, labels, classes)


# ---------------------------------------------------------------------------
# splits, batching, augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"split ratio must be in (0, 1), got {self.ratio}")


def split_train_val(dataset, spec=None):
    """Disjoint, exhaustive and seed-deterministic train/val partition."""
    spec = spec or SplitSpec()
    n = len(dataset)
    order = np.random.default_rng(spec.seed).permutation(n) if spec.shuffle else np.arange(n)
    k = int(round(spec.ratio * n))
    if k == 0 or k == n:
        raise ValueError(f"split of {n} samples at ratio {spec.ratio} leaves an empty side")
    return dataset.subset(np.sort(order[:k])), dataset.subset(np.sort(order[k:]))


def stratified_subset(dataset, n, seed=0):
    """``n`` samples with classes as balanced as possible."""
    rng = np.random.default_rng(seed)
    per = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(dataset.num_classes)]
    picked, i = [], 0
    while len(picked) < n:
        added = False
        for idx in per:
            if i < len(idx) and len(picked) < n:
                picked.append(idx[i])
                added = True
        if not added:
            raise ValueError(f"stratified_subset: only {len(picked)} samples available, asked for {n}")
        i += 1
    return dataset.subset(np.sort(picked))


def iterate_batches(dataset, batch_size, rng=None, shuffle=True, drop_last=False):
    """Yield (images, labels) minibatches; ``rng`` drives the shuffle."""
    n = len(dataset)
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for lo in range(0, stop, batch_size):
        idx = order[lo : lo + batch_size]
        if len(idx):
            yield dataset.images[idx], dataset.labels[idx]


def augment(images, rng, crop=True, flip=True, cutout=False, pad=4, cutout_size=16):
    """Random crop with zero padding, horizontal flip and optional cutout."""
    out = np.array(images, dtype=np.float32, copy=True)
    n, _, h, w = out.shape
    if crop:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if cutout:
        cy = rng.integers(0, h, size=n)
        cx = rng.integers(0, w, size=n)
        half = cutout_size // 2
        for i in range(n):
            out[i, :, max(cy[i] - half, 0) : cy[i] + half, max(cx[i] - half, 0) : cx[i] + half] = 0.0
    return out
